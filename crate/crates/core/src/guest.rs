// SPDX-License-Identifier: Apache-2.0

//! Scripted guest programs.
//!
//! A program is a byte-encoded instruction stream loaded into the cVM's
//! protected memory like any other image page, so it is measured. The
//! monitor fetches and interprets it through the cVM's translation tables.
//! A zero opcode is `Halt`, so running off the end of a program powers the
//! cVM off.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tsi::TsiFunction;

pub const MAX_WRITE_LEN: usize = 4096;
pub const MAX_TSI_DATA: usize = 64;
pub const MAX_CHAIN: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsciFunction {
    CpuOn = 0,
    CpuOff = 1,
    SystemOff = 2,
}

impl PsciFunction {
    pub fn from_code(c: u64) -> Option<Self> {
        match c {
            0 => Some(PsciFunction::CpuOn),
            1 => Some(PsciFunction::CpuOff),
            2 => Some(PsciFunction::SystemOff),
            _ => None,
        }
    }
}

/// One virtqueue descriptor as the guest driver submits it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Desc {
    pub ipa: u64,
    pub len: u32,
    /// Device-writable buffer.
    #[serde(default)]
    pub writable: bool,
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Instr {
    Halt,
    /// Burns `n` ticks; preemptible.
    Compute(u32),
    SetReg { reg: u8, value: u64 },
    MemWrite {
        ipa: u64,
        #[serde(with = "hex_bytes")]
        bytes: Vec<u8>,
    },
    /// Loads `len` bytes and appends them to the guest trace.
    MemRead { ipa: u64, len: u16 },
    Copy { src: u64, dst: u64, len: u16 },
    Tsi {
        function: TsiFunction,
        #[serde(default)]
        args: [u64; 4],
        #[serde(default, with = "hex_bytes")]
        data: Vec<u8>,
    },
    HostCall([u64; 7]),
    MmioRead { ipa: u64 },
    MmioWrite { ipa: u64, value: u64 },
    VirtioSubmit { queue: u8, descs: Vec<Desc> },
    Wfi,
    Psci {
        function: PsciFunction,
        #[serde(default)]
        target: u8,
        #[serde(default)]
        entry: u64,
    },
    /// Sends SGI `intid` to vCPU `target` through the distributor.
    SendIpi { target: u8, intid: u8 },
    ReadFeature { reg: u8 },
    /// Asks the monitor to encrypt and authenticate these I/O window pages
    /// whenever they are copied to the host.
    ProtectIoPages { ipa: u64, pages: u32 },
    /// Retrieves an attestation token into guest memory at `buffer` in
    /// chunks of at most `chunk` bytes.
    RetrieveToken {
        #[serde(with = "hex_bytes")]
        challenge: Vec<u8>,
        buffer: u64,
        chunk: u16,
    },
    /// Appends a marker to the guest trace.
    Mark(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("instruction fetch faulted at {0:#x}")]
    Fault(u64),
    #[error("undefined instruction at {0:#x}")]
    Undefined(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AssembleError {
    #[error("instruction {0}: {1}")]
    Invalid(usize, &'static str),
}

fn op(i: &Instr) -> u8 {
    match i {
        Instr::Halt => 0,
        Instr::Compute(_) => 1,
        Instr::SetReg { .. } => 2,
        Instr::MemWrite { .. } => 3,
        Instr::MemRead { .. } => 4,
        Instr::Copy { .. } => 5,
        Instr::Tsi { .. } => 6,
        Instr::HostCall(_) => 7,
        Instr::MmioRead { .. } => 8,
        Instr::MmioWrite { .. } => 9,
        Instr::VirtioSubmit { .. } => 10,
        Instr::Wfi => 11,
        Instr::Psci { .. } => 12,
        Instr::SendIpi { .. } => 13,
        Instr::ReadFeature { .. } => 14,
        Instr::ProtectIoPages { .. } => 15,
        Instr::RetrieveToken { .. } => 16,
        Instr::Mark(_) => 17,
    }
}

impl Instr {
    pub fn encode(&self, out: &mut Vec<u8>) {
        out.push(op(self));
        let u64s = |out: &mut Vec<u8>, vs: &[u64]| {
            for v in vs {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        match self {
            Instr::Halt | Instr::Wfi => {}
            Instr::Compute(n) => out.extend_from_slice(&n.to_le_bytes()),
            Instr::SetReg { reg, value } => {
                out.push(*reg);
                u64s(out, &[*value]);
            }
            Instr::MemWrite { ipa, bytes } => {
                u64s(out, &[*ipa]);
                out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
                out.extend_from_slice(bytes);
            }
            Instr::MemRead { ipa, len } => {
                u64s(out, &[*ipa]);
                out.extend_from_slice(&len.to_le_bytes());
            }
            Instr::Copy { src, dst, len } => {
                u64s(out, &[*src, *dst]);
                out.extend_from_slice(&len.to_le_bytes());
            }
            Instr::Tsi {
                function,
                args,
                data,
            } => {
                out.push(*function as u8);
                u64s(out, args);
                out.push(data.len() as u8);
                out.extend_from_slice(data);
            }
            Instr::HostCall(args) => u64s(out, args),
            Instr::MmioRead { ipa } => u64s(out, &[*ipa]),
            Instr::MmioWrite { ipa, value } => u64s(out, &[*ipa, *value]),
            Instr::VirtioSubmit { queue, descs } => {
                out.push(*queue);
                out.push(descs.len() as u8);
                for d in descs {
                    u64s(out, &[d.ipa]);
                    out.extend_from_slice(&d.len.to_le_bytes());
                    out.push(u8::from(d.writable));
                }
            }
            Instr::Psci {
                function,
                target,
                entry,
            } => {
                out.push(*function as u8);
                out.push(*target);
                u64s(out, &[*entry]);
            }
            Instr::SendIpi { target, intid } => out.extend_from_slice(&[*target, *intid]),
            Instr::ReadFeature { reg } => out.push(*reg),
            Instr::ProtectIoPages { ipa, pages } => {
                u64s(out, &[*ipa]);
                out.extend_from_slice(&pages.to_le_bytes());
            }
            Instr::RetrieveToken {
                challenge,
                buffer,
                chunk,
            } => {
                out.push(challenge.len() as u8);
                out.extend_from_slice(challenge);
                u64s(out, &[*buffer]);
                out.extend_from_slice(&chunk.to_le_bytes());
            }
            Instr::Mark(v) => u64s(out, &[*v]),
        }
    }

    fn check(&self) -> Result<(), &'static str> {
        match self {
            Instr::MemWrite { bytes, .. } if bytes.len() > MAX_WRITE_LEN => Err("write too long"),
            Instr::Tsi { data, .. } if data.len() > MAX_TSI_DATA => Err("TSI data too long"),
            Instr::SetReg { reg, .. } if *reg > 30 => Err("no such register"),
            Instr::VirtioSubmit { descs, .. } if descs.is_empty() || descs.len() > MAX_CHAIN => {
                Err("descriptor chain must hold 1 to 4 entries")
            }
            Instr::RetrieveToken { challenge, .. } if challenge.len() != 64 => {
                Err("challenge must be 64 bytes")
            }
            Instr::RetrieveToken { chunk: 0, .. } => Err("chunk must be non-zero"),
            _ => Ok(()),
        }
    }

    /// Decodes the instruction at `pc`. `fetch(ipa, n)` returns `n` bytes
    /// of guest memory or `None` when the access faults.
    pub fn decode(
        pc: u64,
        mut fetch: impl FnMut(u64, usize) -> Option<Vec<u8>>,
    ) -> Result<(Instr, u64), DecodeError> {
        let mut at = pc;
        let mut take = |n: usize| -> Result<Vec<u8>, DecodeError> {
            let b = fetch(at, n).ok_or(DecodeError::Fault(at))?;
            at += n as u64;
            Ok(b)
        };
        macro_rules! int {
            ($t:ty) => {{
                let b = take(std::mem::size_of::<$t>())?;
                <$t>::from_le_bytes(b.try_into().unwrap())
            }};
        }
        let undefined = DecodeError::Undefined(pc);
        let code = int!(u8);
        let instr = match code {
            0 => Instr::Halt,
            1 => Instr::Compute(int!(u32)),
            2 => {
                let reg = int!(u8);
                if reg > 30 {
                    return Err(undefined);
                }
                Instr::SetReg {
                    reg,
                    value: int!(u64),
                }
            }
            3 => {
                let ipa = int!(u64);
                let len = int!(u16) as usize;
                if len > MAX_WRITE_LEN {
                    return Err(undefined);
                }
                Instr::MemWrite {
                    ipa,
                    bytes: take(len)?,
                }
            }
            4 => Instr::MemRead {
                ipa: int!(u64),
                len: int!(u16),
            },
            5 => Instr::Copy {
                src: int!(u64),
                dst: int!(u64),
                len: int!(u16),
            },
            6 => {
                let function = TsiFunction::from_code(int!(u8)).ok_or(undefined.clone())?;
                let args = [int!(u64), int!(u64), int!(u64), int!(u64)];
                let len = int!(u8) as usize;
                if len > MAX_TSI_DATA {
                    return Err(undefined);
                }
                Instr::Tsi {
                    function,
                    args,
                    data: take(len)?,
                }
            }
            7 => {
                let mut a = [0u64; 7];
                for v in &mut a {
                    *v = int!(u64);
                }
                Instr::HostCall(a)
            }
            8 => Instr::MmioRead { ipa: int!(u64) },
            9 => Instr::MmioWrite {
                ipa: int!(u64),
                value: int!(u64),
            },
            10 => {
                let queue = int!(u8);
                let n = int!(u8) as usize;
                if n == 0 || n > MAX_CHAIN {
                    return Err(undefined);
                }
                let mut descs = Vec::with_capacity(n);
                for _ in 0..n {
                    descs.push(Desc {
                        ipa: int!(u64),
                        len: int!(u32),
                        writable: int!(u8) != 0,
                    });
                }
                Instr::VirtioSubmit { queue, descs }
            }
            11 => Instr::Wfi,
            12 => {
                let function = PsciFunction::from_code(u64::from(int!(u8))).ok_or(undefined.clone())?;
                Instr::Psci {
                    function,
                    target: int!(u8),
                    entry: int!(u64),
                }
            }
            13 => Instr::SendIpi {
                target: int!(u8),
                intid: int!(u8),
            },
            14 => Instr::ReadFeature { reg: int!(u8) },
            15 => Instr::ProtectIoPages {
                ipa: int!(u64),
                pages: int!(u32),
            },
            16 => {
                let n = int!(u8) as usize;
                if n != 64 {
                    return Err(undefined);
                }
                let challenge = take(n)?;
                let buffer = int!(u64);
                let chunk = int!(u16);
                if chunk == 0 {
                    return Err(undefined);
                }
                Instr::RetrieveToken {
                    challenge,
                    buffer,
                    chunk,
                }
            }
            17 => Instr::Mark(int!(u64)),
            _ => return Err(undefined),
        };
        Ok((instr, at - pc))
    }
}

/// Encodes a program. A trailing `Halt` is implied by zeroed memory.
pub fn assemble(program: &[Instr]) -> Result<Vec<u8>, AssembleError> {
    let mut out = Vec::new();
    for (i, instr) in program.iter().enumerate() {
        instr.check().map_err(|e| AssembleError::Invalid(i, e))?;
        instr.encode(&mut out);
    }
    Ok(out)
}

/// Decodes a flat program image starting at offset 0.
pub fn disassemble(image: &[u8]) -> Result<Vec<Instr>, DecodeError> {
    let mut pc = 0u64;
    let mut out = Vec::new();
    while (pc as usize) < image.len() {
        let (instr, len) = Instr::decode(pc, |at, n| {
            image.get(at as usize..at as usize + n).map(<[u8]>::to_vec)
        })?;
        pc += len;
        out.push(instr);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn program_round_trip() {
        let prog = vec![
            Instr::Compute(10),
            Instr::SetReg { reg: 3, value: 99 },
            Instr::MemWrite { ipa: 0x2000, bytes: b"hello".to_vec() },
            Instr::MemRead { ipa: 0x2000, len: 5 },
            Instr::Copy { src: 1, dst: 2, len: 3 },
            Instr::Tsi { function: TsiFunction::MeasurementExtend, args: [1, 0, 0, 0], data: vec![7; 8] },
            Instr::HostCall([7, 1, 2, 3, 4, 5, 6]),
            Instr::MmioRead { ipa: 0xF000_0000 },
            Instr::MmioWrite { ipa: 0xF000_0008, value: 5 },
            Instr::VirtioSubmit { queue: 1, descs: vec![Desc { ipa: 0x10_0000, len: 16, writable: false }] },
            Instr::Wfi,
            Instr::Psci { function: PsciFunction::CpuOn, target: 1, entry: 0x1000 },
            Instr::SendIpi { target: 1, intid: 2 },
            Instr::ReadFeature { reg: 0 },
            Instr::ProtectIoPages { ipa: 0x10_0000, pages: 2 },
            Instr::RetrieveToken { challenge: vec![1; 64], buffer: 0x3000, chunk: 64 },
            Instr::Mark(5),
            Instr::Halt,
        ];
        let bytes = assemble(&prog).unwrap();
        assert_eq!(disassemble(&bytes).unwrap(), prog);
    }

    #[test]
    fn rejects_malformed() {
        assert!(assemble(&[Instr::SetReg { reg: 31, value: 0 }]).is_err());
        assert!(matches!(disassemble(&[0xEE]), Err(DecodeError::Undefined(0))));
        assert!(matches!(disassemble(&[1, 0]), Err(DecodeError::Fault(1))));
    }

    #[test]
    fn serde_form() {
        let i: Instr = serde_json::from_str(r#"{"mem_write":{"ipa":4096,"bytes":"6869"}}"#).unwrap();
        assert_eq!(i, Instr::MemWrite { ipa: 4096, bytes: b"hi".to_vec() });
    }
}
