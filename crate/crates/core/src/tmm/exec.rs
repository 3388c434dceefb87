// SPDX-License-Identifier: Apache-2.0

//! Guest interpretation: `tec_enter`, the instruction loop and the TSI calls.

use super::*;
use crate::guest::{Instr, PsciFunction, MAX_CHAIN, MAX_TSI_DATA};
use crate::layout::{self, QueueLayout, RawDesc, CHAIN_STRIDE, DESC_F_NEXT, DESC_F_WRITE, QUEUE_SIZE};
use crate::mem::PhysicalMemory;
use crate::platform::Group;
use crate::tsi::{pack_words, TokenRetrieval, TsiFunction, TsiStatus, MAX_MEASUREMENT_INDEX, TSI_VERSION};
use tec::{PendingAbort, PsciRecord, ENTRY_WORDS, EXIT_OFFSET};

const PSCI_INVALID_PARAMS: u64 = (-2i64) as u64;

#[derive(Clone, Copy, Debug)]
pub(super) struct GuestCtx {
    pub cvm: CvmId,
    pub root: GranuleIdx,
    pub params: CvmParams,
}

impl GuestCtx {
    pub fn of(c: &CvmDescriptor) -> GuestCtx {
        GuestCtx {
            cvm: c.id,
            root: c.ttt_root,
            params: c.params,
        }
    }
}

/// Splits `[ipa, ipa + len)` at page boundaries.
fn spans(ipa: u64, len: usize) -> impl Iterator<Item = (u64, usize, usize)> {
    let page = GRANULE_SIZE as u64;
    let mut cur = ipa;
    let end = ipa + len as u64;
    std::iter::from_fn(move || {
        if cur >= end {
            return None;
        }
        let off = (cur % page) as usize;
        let n = ((end - cur) as usize).min(GRANULE_SIZE - off);
        let item = (cur, off, n);
        cur += n as u64;
        Some(item)
    })
}

/// Reads guest memory through the cVM's tables. `Err` carries the first
/// faulting IPA.
pub(super) fn guest_read(
    mem: &mut PhysicalMemory,
    ctx: &GuestCtx,
    who: Requestor,
    ipa: u64,
    len: usize,
) -> Result<Vec<u8>, u64> {
    if ipa.checked_add(len as u64).is_none() {
        return Err(ipa);
    }
    let mut out = Vec::with_capacity(len);
    for (at, off, n) in spans(ipa, len) {
        let (g, attrs) = ttt::translate(mem, ctx.root, at).ok_or(at)?;
        if !attrs.read {
            return Err(at);
        }
        out.extend(mem.read_bytes(who, g, off, n).map_err(|_| at)?);
    }
    Ok(out)
}

/// Writes guest memory; nothing is written unless every page is writable.
pub(super) fn guest_write(
    mem: &mut PhysicalMemory,
    ctx: &GuestCtx,
    who: Requestor,
    ipa: u64,
    bytes: &[u8],
) -> Result<(), u64> {
    if ipa.checked_add(bytes.len() as u64).is_none() {
        return Err(ipa);
    }
    let mut plan = Vec::new();
    for (at, off, n) in spans(ipa, bytes.len()) {
        let (g, attrs) = ttt::translate(mem, ctx.root, at).ok_or(at)?;
        if !attrs.write || mem.check_access(who, g, crate::mem::AccessMode::Write) != crate::mem::Access::Allowed {
            return Err(at);
        }
        plan.push((g, off, n));
    }
    let mut pos = 0;
    for (g, off, n) in plan {
        mem.write(who, g, off, &bytes[pos..pos + n]).expect("checked access");
        pos += n;
    }
    Ok(())
}

fn abort_exit(tec: &mut Tec, ipa: u64, is_write: bool, value: u64, len: u64, dest: Option<u8>) -> ExitInfo {
    tec.pending_abort = Some(PendingAbort {
        ipa,
        is_write,
        len,
        dest,
    });
    tec.trace.push(TraceEvent::Fault { ipa });
    let mut x = ExitInfo::new(ExitReason::DataAbort);
    x.ipa = ipa;
    x.is_write = is_write;
    x.value = value;
    x
}

impl Tmm {
    pub(super) fn tec_enter(&mut self, plat: &mut Platform, cpu: usize, tid: TecId, run_pa: u64, budget: u64) -> TmiResult {
        let tec = self.tecs.get(&tid).ok_or(INPUT)?;
        let run = ns_granule(plat, run_pa)?;
        if budget == 0 || cpu >= plat.cpus() {
            return Err(INPUT);
        }
        let c = &self.cvms[&tec.cvm];
        if c.state != CvmState::Active || !tec.runnable || tec.pending_psci.is_some() {
            return Err(STATE);
        }
        let ctx = GuestCtx::of(c);
        let raw = plat
            .mem
            .read_bytes(Requestor::Tmm, run, 0, ENTRY_WORDS * 8)
            .expect("monitor access");
        let entry = TecEntry::decode(&raw);
        let mut tec = self.tecs.remove(&tid).unwrap();
        self.apply_entry(&mut tec, &entry);
        self.io_sync_in(plat, &ctx);
        let mut exit = self.run(plat, cpu, &ctx, &mut tec, budget);
        exit.lrs = tec.lrs;
        self.tecs.insert(tid, tec);
        match exit.reason {
            ExitReason::SystemOff => self.system_off(ctx.cvm),
            ExitReason::DataAbort if exit.is_write => {
                if let Some(q) = layout::doorbell_queue(&ctx.params, exit.ipa) {
                    self.io_sync_out(plat, &ctx, q);
                }
            }
            _ => {}
        }
        plat.mem
            .write(Requestor::Tmm, run, EXIT_OFFSET, &exit.encode())
            .expect("monitor access");
        plat.ledger.record_exit();
        Ok([exit.reason as u64, exit.ipa, exit.value, 0])
    }

    fn system_off(&mut self, cvm: CvmId) {
        if self.cvm_state(cvm) != CvmState::Active {
            return;
        }
        self.set_state(cvm, CvmState::SystemOff);
        for t in self.tecs.values_mut().filter(|t| t.cvm == cvm) {
            t.runnable = false;
            t.retrieval = None;
        }
    }

    fn apply_entry(&mut self, tec: &mut Tec, entry: &TecEntry) {
        if tec.pending_host_call {
            tec.gprs[..7].copy_from_slice(&entry.results);
            tec.trace.push(TraceEvent::HostCallReturn(entry.results));
            tec.pending_host_call = false;
        }
        if let Some(a) = tec.pending_abort.take() {
            // Without emulation the access is retried, e.g. after the host
            // populated the page.
            if entry.emulated_mmio {
                if let Some(d) = a.dest {
                    tec.gprs[usize::from(d)] = entry.mmio_value;
                }
                tec.pc += a.len;
                tec.trace.push(TraceEvent::Mmio {
                    ipa: a.ipa,
                    value: entry.mmio_value,
                });
            }
        }
        for (slot, lr) in entry.lrs.iter().enumerate() {
            if let (Some(intid), None) = (lr, tec.lrs[slot]) {
                tec.lrs[slot] = Some(*intid);
                self.events.push(MonitorEvent::LrWritten {
                    tec: tec.id,
                    slot,
                    intid: *intid,
                });
            }
        }
    }

    fn run(&mut self, plat: &mut Platform, cpu: usize, ctx: &GuestCtx, tec: &mut Tec, budget: u64) -> ExitInfo {
        let mut used = 0u64;
        loop {
            let pending: Vec<u32> = plat.gic.pending().filter(|&(c, _)| c == cpu).map(|(_, i)| i).collect();
            let mut normal = None;
            for intid in pending {
                match plat.gic.group(intid) {
                    Group::G0 => {
                        plat.monitor_ack(cpu, intid);
                        self.events.push(MonitorEvent::SecureHandled { cpu, intid });
                    }
                    Group::G1 => {
                        normal.get_or_insert(intid);
                    }
                }
            }
            if let Some(intid) = normal {
                self.events.push(MonitorEvent::FiqTaken { cpu, intid });
                let mut x = ExitInfo::new(ExitReason::Irq);
                x.value = u64::from(intid);
                return x;
            }
            if let Some(slot) = tec.lrs.iter().position(Option::is_some) {
                let intid = tec.lrs[slot].take().unwrap();
                tec.trace.push(TraceEvent::Virq(intid));
                self.events.push(MonitorEvent::VirqHandled { tec: tec.id, intid });
                tec.wfi = false;
                continue;
            }
            if tec.wfi {
                return ExitInfo::new(ExitReason::Wfi);
            }
            if used >= budget {
                return ExitInfo::new(ExitReason::Quantum);
            }
            match self.step(plat, ctx, tec, budget - used) {
                Ok(n) => used += n,
                Err(x) => return x,
            }
        }
    }

    /// Executes one instruction (or one slice of a long `Compute`) and
    /// returns the ticks it took.
    fn step(&mut self, plat: &mut Platform, ctx: &GuestCtx, tec: &mut Tec, left: u64) -> Result<u64, ExitInfo> {
        let who = Requestor::Cvm(ctx.cvm);
        let decoded = Instr::decode(tec.pc, |ipa, n| guest_read(&mut plat.mem, ctx, who, ipa, n).ok());
        let (instr, len) = match decoded {
            Ok(d) => d,
            Err(crate::guest::DecodeError::Fault(ipa)) => return Err(abort_exit(tec, ipa, false, 0, 0, None)),
            Err(crate::guest::DecodeError::Undefined(_)) => return Err(ExitInfo::new(ExitReason::SystemOff)),
        };
        if let Instr::Compute(n) = instr {
            return Ok(self.compute(plat, tec, u64::from(n), len, left));
        }
        plat.tick(1);
        let next = tec.pc + len;
        match instr {
            Instr::Compute(_) => unreachable!(),
            Instr::Halt => return Err(ExitInfo::new(ExitReason::SystemOff)),
            Instr::SetReg { reg, value } => {
                if let Some(r) = tec.gprs.get_mut(usize::from(reg)) {
                    *r = value;
                }
            }
            Instr::MemWrite { ipa, bytes } => {
                if let Err(at) = guest_write(&mut plat.mem, ctx, who, ipa, &bytes) {
                    return Err(abort_exit(tec, at, true, 0, len, None));
                }
            }
            Instr::MemRead { ipa, len: n } => match guest_read(&mut plat.mem, ctx, who, ipa, usize::from(n)) {
                Ok(bytes) => tec.trace.push(TraceEvent::Read { ipa, bytes }),
                Err(at) => return Err(abort_exit(tec, at, false, 0, len, None)),
            },
            Instr::Copy { src, dst, len: n } => {
                let bytes = guest_read(&mut plat.mem, ctx, who, src, usize::from(n))
                    .map_err(|at| abort_exit(tec, at, false, 0, len, None))?;
                guest_write(&mut plat.mem, ctx, who, dst, &bytes).map_err(|at| abort_exit(tec, at, true, 0, len, None))?;
            }
            Instr::Tsi { function, args, data } => {
                if function == TsiFunction::HostCall {
                    self.count_tsi(function);
                    let mut a = [0u64; 7];
                    a[..4].copy_from_slice(&args);
                    tec.pc = next;
                    return Err(self.host_call(tec, a));
                }
                let (status, results) = self.tsi_call(plat, ctx, tec, function, args, &data);
                self.tsi_result(tec, function, status, results);
            }
            Instr::HostCall(args) => {
                tec.pc = next;
                return Err(self.host_call(tec, args));
            }
            Instr::MmioRead { ipa } => match guest_read(&mut plat.mem, ctx, who, ipa, 8) {
                Ok(b) => {
                    let value = u64::from_le_bytes(b.try_into().unwrap());
                    tec.gprs[0] = value;
                    tec.trace.push(TraceEvent::Mmio { ipa, value });
                }
                Err(at) => return Err(abort_exit(tec, at, false, 0, len, Some(0))),
            },
            Instr::MmioWrite { ipa, value } => {
                if let Err(at) = guest_write(&mut plat.mem, ctx, who, ipa, &value.to_le_bytes()) {
                    return Err(abort_exit(tec, at, true, value, len, None));
                }
            }
            Instr::SendIpi { target, intid } => {
                let ipa = layout::sgir_ipa(&ctx.params);
                let value = layout::encode_sgi(target, intid);
                if let Err(at) = guest_write(&mut plat.mem, ctx, who, ipa, &value.to_le_bytes()) {
                    return Err(abort_exit(tec, at, true, value, len, None));
                }
            }
            Instr::VirtioSubmit { queue, descs } => {
                if u32::from(queue) >= ctx.params.io_queues || descs.is_empty() || descs.len() > MAX_CHAIN {
                    tec.gprs[0] = 1;
                    tec.trace.push(TraceEvent::Fault { ipa: 0 });
                } else {
                    self.virtio_submit(plat, ctx, tec, u32::from(queue), &descs, len)?;
                }
            }
            Instr::Wfi => tec.wfi = true,
            Instr::Psci { function, target, entry } => match function {
                PsciFunction::SystemOff => return Err(ExitInfo::new(ExitReason::SystemOff)),
                PsciFunction::CpuOff => {
                    tec.pc = next;
                    tec.runnable = false;
                    tec.retrieval = None;
                    return Err(psci_exit(function, target, entry));
                }
                PsciFunction::CpuOn => {
                    let exists = self.tecs.values().any(|t| t.cvm == ctx.cvm && t.index == target);
                    if !exists || target == tec.index {
                        tec.gprs[0] = PSCI_INVALID_PARAMS;
                        tec.trace.push(TraceEvent::PsciDone {
                            function,
                            status: PSCI_INVALID_PARAMS,
                        });
                    } else {
                        tec.pc = next;
                        tec.pending_psci = Some(PsciRecord { function, target, entry });
                        return Err(psci_exit(function, target, entry));
                    }
                }
            },
            Instr::ReadFeature { reg } => {
                let r = self.read_feature_register(ctx.cvm, reg);
                tec.gprs[0] = u64::from(r.is_err());
                tec.gprs[1] = r.unwrap_or(0);
                tec.trace.push(TraceEvent::Feature {
                    reg,
                    value: r.unwrap_or(u64::MAX),
                });
            }
            Instr::ProtectIoPages { ipa, pages } => {
                let page = GRANULE_SIZE as u64;
                let range = ipa / page..ipa / page + u64::from(pages);
                let io = ctx.params.io_pages();
                let ok = ipa % page == 0 && pages > 0 && range.start >= io.start && range.end <= io.end;
                if ok {
                    let mut label = b"io".to_vec();
                    label.extend(ctx.cvm.0.to_le_bytes());
                    label.extend(self.cvms[&ctx.cvm].measurement_value());
                    let key = self.keys.derive_storage_key(&label);
                    self.protection
                        .entry(ctx.cvm)
                        .or_insert_with(|| PageProtection::new(&key))
                        .protect(range);
                }
                tec.gprs[0] = u64::from(!ok);
                tec.trace.push(TraceEvent::Protect { ok });
            }
            Instr::RetrieveToken { challenge, buffer, chunk } => {
                self.retrieve_token(plat, ctx, tec, &challenge, buffer, chunk);
            }
            Instr::Mark(v) => tec.trace.push(TraceEvent::Mark(v)),
        }
        tec.pc = next;
        Ok(1)
    }

    fn compute(&mut self, plat: &mut Platform, tec: &mut Tec, n: u64, len: u64, left: u64) -> u64 {
        if n == 0 {
            plat.tick(1);
            tec.pc += len;
            return 1;
        }
        if tec.compute_left == 0 {
            tec.compute_left = n;
        }
        // Stop at the next programmed interrupt so it is seen on time.
        let mut slice = tec.compute_left.min(left);
        if let Some(at) = plat.next_scheduled() {
            if at > plat.clock() {
                slice = slice.min(at - plat.clock());
            }
        }
        let slice = slice.max(1);
        plat.tick(slice);
        tec.compute_left -= slice;
        if tec.compute_left == 0 {
            tec.pc += len;
        }
        slice
    }

    fn host_call(&mut self, tec: &mut Tec, args: [u64; 7]) -> ExitInfo {
        tec.pending_host_call = true;
        let mut x = ExitInfo::new(ExitReason::HostCall);
        x.args = args;
        x
    }

    fn virtio_submit(
        &mut self,
        plat: &mut Platform,
        ctx: &GuestCtx,
        tec: &mut Tec,
        queue: u32,
        descs: &[crate::guest::Desc],
        len: u64,
    ) -> Result<(), ExitInfo> {
        let who = Requestor::Cvm(ctx.cvm);
        let q = QueueLayout::of(&ctx.params, queue);
        let fault = |tec: &mut Tec, at| abort_exit(tec, at, true, 0, len, None);
        // Probe both ring pages before touching either.
        for addr in [q.desc, q.avail] {
            let b = guest_read(&mut plat.mem, ctx, who, addr, 1).map_err(|at| fault(tec, at))?;
            guest_write(&mut plat.mem, ctx, who, addr, &b).map_err(|at| fault(tec, at))?;
        }
        let idx_bytes = guest_read(&mut plat.mem, ctx, who, q.avail_idx_addr(), 2).map_err(|at| fault(tec, at))?;
        let idx = u16::from_le_bytes([idx_bytes[0], idx_bytes[1]]);
        let head = idx.wrapping_mul(CHAIN_STRIDE) % QUEUE_SIZE;
        for (i, d) in descs.iter().enumerate() {
            let slot = (head + i as u16) % QUEUE_SIZE;
            let more = i + 1 < descs.len();
            let raw = RawDesc {
                addr: d.ipa,
                len: d.len,
                flags: if more { DESC_F_NEXT } else { 0 } | if d.writable { DESC_F_WRITE } else { 0 },
                next: if more { (slot + 1) % QUEUE_SIZE } else { 0 },
            };
            guest_write(&mut plat.mem, ctx, who, q.desc_addr(slot), &raw.encode()).map_err(|at| fault(tec, at))?;
        }
        guest_write(&mut plat.mem, ctx, who, q.avail_ring_addr(idx), &head.to_le_bytes()).map_err(|at| fault(tec, at))?;
        guest_write(&mut plat.mem, ctx, who, q.avail_idx_addr(), &idx.wrapping_add(1).to_le_bytes())
            .map_err(|at| fault(tec, at))?;
        let bell = layout::doorbell_ipa(&ctx.params, queue);
        let value = u64::from(queue);
        if let Err(at) = guest_write(&mut plat.mem, ctx, who, bell, &value.to_le_bytes()) {
            return Err(abort_exit(tec, at, true, value, len, None));
        }
        tec.gprs[0] = 0;
        Ok(())
    }

    fn retrieve_token(&mut self, plat: &mut Platform, ctx: &GuestCtx, tec: &mut Tec, challenge: &[u8], buffer: u64, chunk: u16) {
        let resume = tec
            .retrieval
            .as_ref()
            .is_some_and(|r| r.is_mid_flight() && r.challenge[..] == *challenge);
        if !resume {
            let f = TsiFunction::AttestationTokenInit;
            let (status, results) = self.tsi_call(plat, ctx, tec, f, [0; 4], challenge);
            self.tsi_result(tec, f, status, results);
            if status != TsiStatus::Success {
                return;
            }
        }
        let f = TsiFunction::AttestationTokenContinue;
        loop {
            let cursor = tec.retrieval.as_ref().map_or(0, |r| r.cursor) as u64;
            plat.tick(1);
            let (status, results) = self.tsi_call(plat, ctx, tec, f, [buffer + cursor, u64::from(chunk), 0, 0], &[]);
            self.tsi_result(tec, f, status, results);
            if status != TsiStatus::Incomplete {
                if status == TsiStatus::Success {
                    tec.gprs[1] = cursor + results[0];
                }
                return;
            }
        }
    }

    fn tsi_result(&mut self, tec: &mut Tec, function: TsiFunction, status: TsiStatus, results: [u64; 4]) {
        tec.gprs[0] = status as u64;
        tec.gprs[1..5].copy_from_slice(&results);
        tec.trace.push(TraceEvent::Tsi {
            function,
            status,
            results,
        });
    }

    fn count_tsi(&mut self, f: TsiFunction) {
        *self.coverage.tsi.entry(f.name().to_string()).or_default() += 1;
    }

    fn tsi_call(
        &mut self,
        plat: &mut Platform,
        ctx: &GuestCtx,
        tec: &mut Tec,
        function: TsiFunction,
        args: [u64; 4],
        data: &[u8],
    ) -> (TsiStatus, [u64; 4]) {
        use TsiStatus::*;
        self.count_tsi(function);
        let who = Requestor::Cvm(ctx.cvm);
        match function {
            TsiFunction::Version => (Success, [TSI_VERSION.0, TSI_VERSION.1, 0, 0]),
            TsiFunction::CvmConfig => {
                let p = ctx.params;
                if args[0] != 0 && guest_write(&mut plat.mem, ctx, who, args[0], &p.encode()).is_err() {
                    return (ErrorInput, [0; 4]);
                }
                (
                    Success,
                    [
                        u64::from(p.ipa_width),
                        p.protected_ipa_limit,
                        u64::from(p.hash_algo),
                        u64::from(p.vcpu_count),
                    ],
                )
            }
            TsiFunction::MeasurementRead => {
                let c = &self.cvms[&ctx.cvm];
                match args[0] {
                    0 => (Success, pack_words(&c.measurement_value())),
                    i @ 1..=MAX_MEASUREMENT_INDEX => (Success, pack_words(&c.rem[i as usize - 1])),
                    _ => (ErrorInput, [0; 4]),
                }
            }
            TsiFunction::MeasurementExtend => {
                let i = args[0];
                if !(1..=MAX_MEASUREMENT_INDEX).contains(&i) || data.len() > MAX_TSI_DATA {
                    return (ErrorInput, [0; 4]);
                }
                let rem = &mut self.cvms.get_mut(&ctx.cvm).unwrap().rem[i as usize - 1];
                let mut buf = rem.to_vec();
                buf.extend_from_slice(data);
                *rem = sha256(&buf);
                (Success, [0; 4])
            }
            TsiFunction::AttestationTokenInit => {
                let Ok(challenge) = <[u8; 64]>::try_from(data) else {
                    return (ErrorInput, [0; 4]);
                };
                if tec.retrieval.as_ref().is_some_and(TokenRetrieval::is_mid_flight) {
                    return (ErrorState, [0; 4]);
                }
                let token = self.build_token(ctx.cvm, &challenge).expect("active cVM");
                let bytes = token.encode();
                let n = bytes.len() as u64;
                tec.retrieval = Some(TokenRetrieval {
                    challenge,
                    bytes,
                    cursor: 0,
                });
                (Success, [n, 0, 0, 0])
            }
            TsiFunction::AttestationTokenContinue => {
                let Some(r) = tec.retrieval.as_mut() else {
                    return (ErrorState, [0; 4]);
                };
                let max = args[1].min(GRANULE_SIZE as u64) as usize;
                if max == 0 {
                    return (ErrorInput, [0; 4]);
                }
                let end = (r.cursor + max).min(r.bytes.len());
                if guest_write(&mut plat.mem, ctx, who, args[0], &r.bytes[r.cursor..end]).is_err() {
                    return (ErrorInput, [0; 4]);
                }
                let n = r.next_chunk(max).len() as u64;
                if r.is_done() {
                    let total = r.bytes.len() as u64;
                    tec.retrieval = None;
                    (Success, [n, total, 0, 0])
                } else {
                    (Incomplete, [n, 0, 0, 0])
                }
            }
            // Host calls leave the guest; handled by the caller.
            TsiFunction::HostCall => (ErrorInput, [0; 4]),
        }
    }
}

fn psci_exit(function: PsciFunction, target: u8, entry: u64) -> ExitInfo {
    let mut x = ExitInfo::new(ExitReason::Psci);
    x.psci_function = function as u64;
    x.psci_target = u64::from(target);
    x.psci_entry = entry;
    x
}
