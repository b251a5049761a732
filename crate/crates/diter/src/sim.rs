//! Deterministic time-stepped simulation of the diffusion solver split
//! across `K` asynchronous units. Each unit owns a node interval, runs the
//! threshold scan on its own fluid, and periodically ships the mass owed to
//! other intervals as messages. A step gives every unit the same operation
//! budget; the rest of the budget is idle time. Message sends can be delayed
//! by a Bernoulli channel, retried every step, which yields a geometric
//! delay with mean `speed * p / (1 - p)` operations.
//!
//! Cross-interval mass is not pushed edge by edge. A unit records which of
//! its nodes collected fluid since the last exchange and replays only those
//! history increments over the cut edges (`d * delta / out_degree` per
//! external child), so repeated diffusions of a node between exchanges cost
//! one traversal. Dangling mass is redistributed as a per-node rate.

use std::collections::HashMap;
use std::io;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::Graph;
use crate::partition::{self, Partition, PartitionError, UnitLoad};
use crate::solver::{SolverConfig, SolverError, SolverState};

pub const DEFAULT_MAX_STEPS: u64 = 1_000_000;
pub const DEFAULT_RESCALE_COEFF: f64 = 1.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("no convergence within {steps} steps")]
    MaxSteps { steps: u64 },
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("invalid config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Uniform,
    CostBalanced,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Uniform => "uniform",
            Strategy::CostBalanced => "cb",
        }
    }
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uniform" => Ok(Strategy::Uniform),
            "cb" => Ok(Strategy::CostBalanced),
            other => Err(format!("unknown strategy `{other}` (use uniform or cb)")),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-step operation budget of one unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Speed {
    /// `max(1, edges / units)`: together the units match one full-sweep
    /// engine per step.
    Auto,
    Fixed(u64),
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub units: usize,
    pub speed: Speed,
    /// Probability that a ready message is held back one step.
    pub delay_proba: f64,
    pub strategy: Strategy,
    pub seed: u64,
    /// Threshold rescale coefficient applied on reception.
    pub rescale_coeff: f64,
    /// Steps between rebalance checks in adaptive runs.
    pub adapt_interval: u64,
    pub max_steps: u64,
    pub solver: SolverConfig,
}

impl SimConfig {
    pub fn new(units: usize, solver: SolverConfig) -> Self {
        SimConfig {
            units,
            speed: Speed::Auto,
            delay_proba: 0.0,
            strategy: Strategy::Uniform,
            seed: 0,
            rescale_coeff: DEFAULT_RESCALE_COEFF,
            adapt_interval: 1,
            max_steps: DEFAULT_MAX_STEPS,
            solver,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.units == 0 {
            return Err(SimError::BadConfig("need at least one unit".into()));
        }
        if !(0.0..1.0).contains(&self.delay_proba) {
            return Err(SimError::BadConfig(format!(
                "delay probability {} not in [0, 1)",
                self.delay_proba
            )));
        }
        if let Speed::Fixed(0) = self.speed {
            return Err(SimError::BadConfig("speed must be at least 1".into()));
        }
        if !(self.rescale_coeff > 0.0) {
            return Err(SimError::BadConfig("rescale coefficient must be > 0".into()));
        }
        if self.adapt_interval == 0 {
            return Err(SimError::BadConfig("adapt interval must be at least 1".into()));
        }
        Ok(())
    }
}

/// Uniform mass component of a message: `rate` per node over the target
/// interval it was addressed to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformShare {
    pub rate: f64,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub from: usize,
    pub to: usize,
    /// Global node id, mass. Sorted by node, all masses positive.
    pub deltas: Vec<(u32, f64)>,
    pub uniform: Option<UniformShare>,
    pub dispatched: u64,
    pub deliver_at: u64,
}

impl Message {
    pub fn mass(&self) -> f64 {
        let sparse: f64 = self.deltas.iter().map(|&(_, m)| m).sum();
        let uniform = self
            .uniform
            .map(|u| u.rate * (u.end - u.start) as f64)
            .unwrap_or(0.0);
        sparse + uniform
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub unit: usize,
    /// Operations so far over the edge count.
    pub norm_cost: f64,
    /// This unit's residual over `1 - damping`.
    pub bound: f64,
    /// Mass buffered for other units after this step's exchange.
    pub outgoing: f64,
    /// Cumulative idle over cumulative capacity.
    pub idle_frac: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalRow {
    pub step: u64,
    /// Unsettled mass anywhere (residuals, buffers, transit) over `1 - d`.
    pub bound: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
    pub global: Vec<GlobalRow>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub history: Vec<f64>,
    pub trace: Trace,
    pub steps: u64,
    pub speed: u64,
    /// Convergence time in normalized operations: the slowest unit's
    /// consumed capacity (work plus idle, the final partial step's leftover
    /// excluded) over the edge count.
    pub converged_cost: f64,
    pub unit_ops: Vec<u64>,
    pub unit_idle: Vec<u64>,
    /// Mass merged into each node from messages (diagnostics).
    pub delivered_mass: Vec<f64>,
    /// `(step, boundary)` of every rebalance in adaptive runs; the initial
    /// boundary is recorded at step 0.
    pub boundary_history: Vec<(u64, usize)>,
}

impl RunResult {
    pub fn unit_idle_proportion(&self, unit: usize) -> f64 {
        ratio(self.unit_idle[unit], self.unit_ops[unit])
    }

    pub fn global_idle_proportion(&self) -> f64 {
        ratio(self.unit_idle.iter().sum(), self.unit_ops.iter().sum())
    }

    pub fn write_trace_csv(&self, mut w: impl io::Write) -> io::Result<()> {
        writeln!(w, "step,unit,norm_cost,bound,outgoing,idle_frac")?;
        for r in &self.trace.rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.step, r.unit, r.norm_cost, r.bound, r.outgoing, r.idle_frac
            )?;
        }
        writeln!(w, "TOTAL,{},{}", self.converged_cost, self.global_idle_proportion())
    }
}

fn ratio(idle: u64, ops: u64) -> f64 {
    if idle == 0 {
        0.0
    } else {
        idle as f64 / (ops + idle) as f64
    }
}

/// Send once the buffer tops the unit's share of its own residual, once
/// asleep with anything pending, or when retrying a delayed send.
fn wants_send(outgoing_mass: f64, residual: f64, units: usize, asleep: bool, blocked: bool) -> bool {
    blocked || asleep || outgoing_mass > residual / units as f64
}

/// One channel trial; `false` delays the send to the next step.
fn send_cleared(rng: &mut ChaCha8Rng, delay_proba: f64) -> bool {
    delay_proba <= 0.0 || !rng.gen_bool(delay_proba)
}

/// Threshold rescale factor on reception when the residual is positive.
fn reception_rescale(residual_before: f64, received: f64) -> f64 {
    ((residual_before + received) / residual_before).min(received)
}

struct Unit {
    id: usize,
    solver: SolverState,
    /// History snapshot at the last increment collection.
    h_old: Vec<f64>,
    /// Accumulated mass per external node since the last send.
    outgoing: HashMap<u32, f64>,
    /// Per-node rate owed to every external node (dangling redistribution).
    outgoing_uniform: f64,
    /// Total buffered mass (sparse plus uniform spread).
    outgoing_mass: f64,
    send_blocked: bool,
    rng: ChaCha8Rng,
    export_ops: u64,
    idle: u64,
    debt: u64,
    damping: f64,
}

impl Unit {
    fn new(g: &Graph, cfg: &SimConfig, id: usize, owned: Range<usize>) -> Result<Self, SolverError> {
        let solver = SolverState::new(g, &cfg.solver, owned)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(id as u64 + 1);
        Ok(Unit {
            id,
            h_old: solver.history().to_vec(),
            solver,
            outgoing: HashMap::new(),
            outgoing_uniform: 0.0,
            outgoing_mass: 0.0,
            send_blocked: false,
            rng,
            export_ops: 0,
            idle: 0,
            debt: 0,
            damping: cfg.solver.damping,
        })
    }

    fn total_ops(&self) -> u64 {
        self.solver.ops() + self.export_ops
    }

    /// Runs the scan for one step. Earlier overshoot and exchange costs are
    /// paid back out of the budget first. Returns `(work, idle)`.
    fn work(&mut self, g: &Graph, speed: u64, stop_mass: f64) -> (u64, u64) {
        let repaid = self.debt.min(speed);
        self.debt -= repaid;
        let available = speed - repaid;
        let mut used = 0;
        if available > 0 && self.solver.residual() > stop_mass {
            used = self.solver.scan_pass(g, available, stop_mass);
        }
        let idle = available - used.min(available);
        if used > available {
            self.debt += used - available;
        }
        debug_assert_eq!(repaid + used.min(available) + idle, speed);
        (used, idle)
    }

    /// Replays history increments since the last call over cut edges into
    /// the outgoing buffers. Costs one op per external child traversed,
    /// charged against the next step's budget.
    fn collect_outgoing(&mut self, g: &Graph) {
        let touched = self.solver.take_touched();
        let owned = self.solver.owned();
        let (start, end) = (owned.start as u32, owned.end as u32);
        let mut pairs = 0u64;
        let mut added = 0.0f64;
        {
            let h = self.solver.history();
            for local in touched {
                let delta = h[local as usize] - self.h_old[local as usize];
                self.h_old[local as usize] = h[local as usize];
                if delta <= 0.0 {
                    continue;
                }
                let node = owned.start + local as usize;
                let degree = g.out_degree(node);
                if degree == 0 {
                    continue; // went to the pool, redistributed on drain
                }
                let kids = g.children(node);
                let lo = kids.partition_point(|&c| c < start);
                let hi = kids.partition_point(|&c| c < end);
                if lo == 0 && hi == kids.len() {
                    continue;
                }
                let share = self.damping * delta / degree as f64;
                for &c in kids[..lo].iter().chain(&kids[hi..]) {
                    *self.outgoing.entry(c).or_insert(0.0) += share;
                    added += share;
                }
                pairs += (kids.len() - (hi - lo)) as u64;
            }
        }
        self.outgoing_mass += added;
        let claimed = self.solver.take_external_outflow();
        debug_assert!(
            (claimed - added).abs() <= 1e-9 + 1e-9 * claimed.abs(),
            "increment replay drifted from the diffusion ledger: {claimed} vs {added}"
        );
        let rate = self.solver.take_uniform_outflow();
        if rate > 0.0 {
            self.outgoing_uniform += rate;
            self.outgoing_mass += rate * (g.n() - owned.len()) as f64;
        }
        self.export_ops += pairs;
        self.debt += pairs;
    }

    /// Transmission opportunity: at most one per step.
    fn try_send(&mut self, p: &Partition, delay_proba: f64, stop_mass: f64, step: u64) -> Vec<Message> {
        if self.outgoing.is_empty() && self.outgoing_uniform == 0.0 {
            self.outgoing_mass = 0.0;
            return Vec::new();
        }
        let asleep = self.solver.residual() <= stop_mass;
        if !wants_send(
            self.outgoing_mass,
            self.solver.residual(),
            p.k(),
            asleep,
            self.send_blocked,
        ) {
            return Vec::new();
        }
        if !send_cleared(&mut self.rng, delay_proba) {
            self.send_blocked = true;
            return Vec::new();
        }
        self.send_blocked = false;

        let mut pairs: Vec<(u32, f64)> = self.outgoing.drain().collect();
        pairs.sort_unstable_by_key(|&(node, _)| node);
        let rate = std::mem::take(&mut self.outgoing_uniform);
        self.outgoing_mass = 0.0;

        let mut messages = Vec::new();
        let mut cursor = 0usize;
        for dest in 0..p.k() {
            let interval = p.interval(dest);
            let from = cursor;
            while cursor < pairs.len() && (pairs[cursor].0 as usize) < interval.end {
                cursor += 1;
            }
            let deltas: Vec<(u32, f64)> =
                pairs[from..cursor].iter().copied().filter(|&(_, m)| m > 0.0).collect();
            let uniform = (rate > 0.0 && dest != self.id).then_some(UniformShare {
                rate,
                start: interval.start,
                end: interval.end,
            });
            if deltas.is_empty() && uniform.is_none() {
                continue;
            }
            debug_assert!(dest != self.id || deltas.iter().all(|&(nd, _)| {
                // after a rebalance a unit may buy back mass it buffered
                // for nodes it now owns again
                p.owner(nd as usize) == self.id
            }));
            messages.push(Message {
                from: self.id,
                to: dest,
                deltas,
                uniform,
                dispatched: step,
                deliver_at: step + 1,
            });
        }
        messages
    }

    fn idle_fraction(&self) -> f64 {
        ratio(self.idle, self.total_ops())
    }

    fn recompute_outgoing_mass(&mut self, n: usize) {
        let sparse: f64 = self.outgoing.values().sum();
        self.outgoing_mass =
            sparse + self.outgoing_uniform * (n - self.solver.owned().len()) as f64;
    }
}

/// Merges a message into the current owners of its nodes, rescaling each
/// receiver's threshold by the configured reception rule.
fn deliver(
    units: &mut [Unit],
    p: &Partition,
    msg: &Message,
    rescale_coeff: f64,
    delivered: &mut [f64],
) {
    let k = units.len();
    let before: Vec<f64> = units.iter().map(|u| u.solver.residual()).collect();
    let mut received = vec![0.0f64; k];
    for &(node, mass) in &msg.deltas {
        let owner = p.owner(node as usize);
        units[owner].solver.receive(node as usize, mass);
        received[owner] += mass;
        delivered[node as usize] += mass;
    }
    if let Some(u) = msg.uniform {
        for dest in 0..k {
            let interval = p.interval(dest);
            let lo = interval.start.max(u.start);
            let hi = interval.end.min(u.end);
            if lo >= hi {
                continue;
            }
            units[dest].solver.receive_uniform_over(lo..hi, u.rate);
            received[dest] += u.rate * (hi - lo) as f64;
            for d in &mut delivered[lo..hi] {
                *d += u.rate;
            }
        }
    }
    let total: f64 = received.iter().sum();
    debug_assert!((total - msg.mass()).abs() <= 1e-12 + 1e-9 * msg.mass());
    for dest in 0..k {
        if received[dest] <= 0.0 {
            continue;
        }
        let t = units[dest].solver.threshold();
        let t_next = if before[dest] > 0.0 {
            t * rescale_coeff * reception_rescale(before[dest], received[dest])
        } else {
            rescale_coeff * received[dest]
        };
        units[dest].solver.set_threshold(t_next);
    }
}

/// Moves the interval between the two units after a boundary change and
/// charges the gaining unit the transfer cost.
fn rebalance(g: &Graph, cfg: &SimConfig, units: &mut [Unit], old_p: &Partition, new_p: &Partition) {
    let w_old = old_p.boundaries()[1];
    let w_new = new_p.boundaries()[1];
    debug_assert!(w_old != w_new);
    let (loser, gainer, moved) = if w_new < w_old {
        (0usize, 1usize, w_new..w_old)
    } else {
        (1usize, 0usize, w_old..w_new)
    };
    let (head, tail) = units.split_at_mut(1);
    let (u0, u1) = (&mut head[0], &mut tail[0]);
    let (lu, gu) = if loser == 0 { (&mut *u0, &mut *u1) } else { (&mut *u1, &mut *u0) };

    // after collect_outgoing, h_old equals history, so moved nodes carry no
    // pending increments
    let l_owned = lu.solver.owned();
    let span = (moved.start - l_owned.start)..(moved.end - l_owned.start);
    let moved_f = lu.solver.fluid()[span.clone()].to_vec();
    let moved_h = lu.solver.history()[span.clone()].to_vec();

    let keep = |v: &[f64]| {
        let mut kept = v.to_vec();
        kept.drain(span.clone());
        kept
    };
    let kept_f = keep(lu.solver.fluid());
    let kept_h = keep(lu.solver.history());
    let l_new = new_p.interval(loser);
    lu.solver = SolverState::from_parts(
        g,
        &cfg.solver,
        l_new,
        kept_f,
        kept_h,
        lu.solver.pool(),
        lu.solver.threshold(),
        lu.solver.ops(),
    );
    lu.h_old = lu.solver.history().to_vec();

    let g_new = new_p.interval(gainer);
    let (mut gf, mut gh) = (moved_f, moved_h);
    if g_new.start < moved.start {
        // gaining on the high side: moved range goes after the old vectors
        gf = [gu.solver.fluid(), &gf].concat();
        gh = [gu.solver.history(), &gh].concat();
    } else {
        gf = [gf.as_slice(), gu.solver.fluid()].concat();
        gh = [gh.as_slice(), gu.solver.history()].concat();
    }
    gu.solver = SolverState::from_parts(
        g,
        &cfg.solver,
        g_new,
        gf,
        gh,
        gu.solver.pool(),
        gu.solver.threshold(),
        gu.solver.ops(),
    );
    gu.h_old = gu.solver.history().to_vec();

    // the gainer's buffered uniform rate was owed to the nodes it now owns:
    // settle it locally; the loser now owes its rate to the moved nodes
    if gu.outgoing_uniform > 0.0 {
        gu.solver.receive_uniform_over(moved.clone(), gu.outgoing_uniform);
    }
    gu.recompute_outgoing_mass(g.n());
    lu.recompute_outgoing_mass(g.n());

    let transfer = moved.len() as u64;
    gu.export_ops += transfer;
    gu.debt += transfer;
}

fn drive(g: &Graph, cfg: &SimConfig, adaptive: bool) -> Result<RunResult, SimError> {
    cfg.validate()?;
    if adaptive && cfg.units != 2 {
        return Err(SimError::BadConfig(format!(
            "adaptive runs need exactly 2 units, got {}",
            cfg.units
        )));
    }
    let n = g.n();
    let k = cfg.units;
    let mut p = match cfg.strategy {
        Strategy::Uniform => partition::uniform(n, k)?,
        Strategy::CostBalanced => partition::cost_balanced(g, k)?,
    };
    let speed = match cfg.speed {
        Speed::Auto => ((g.edge_count() / k) as u64).max(1),
        Speed::Fixed(s) => s,
    };
    let damping = cfg.solver.damping;
    let target = cfg.solver.target_error;
    let stop_mass = (1.0 - damping) * target / k as f64;
    let norm = g.edge_count().max(1) as f64;

    let mut units: Vec<Unit> = (0..k)
        .map(|id| Unit::new(g, cfg, id, p.interval(id)))
        .collect::<Result<_, _>>()?;
    let mut trace = Trace::default();
    let mut delivered = vec![0.0f64; n];
    let mut boundary_history = Vec::new();
    if adaptive {
        boundary_history.push((0, p.boundaries()[1]));
    }

    for step in 0..cfg.max_steps {
        let mut idle_now = vec![0u64; k];
        for u in units.iter_mut() {
            let (_, idle) = u.work(g, speed, stop_mass);
            idle_now[u.id] = idle;
        }
        if k > 1 {
            let mut messages = Vec::new();
            for u in units.iter_mut() {
                u.collect_outgoing(g);
                messages.extend(u.try_send(&p, cfg.delay_proba, stop_mass, step));
            }
            for m in &messages {
                deliver(&mut units, &p, m, cfg.rescale_coeff, &mut delivered);
            }
        }
        if adaptive && step % cfg.adapt_interval == 0 {
            let loads: Vec<UnitLoad> = units
                .iter()
                .map(|u| UnitLoad { residual: u.solver.residual(), ops: u.total_ops() })
                .collect();
            let next = partition::adapt_boundary(&p, &loads)?;
            if next != p {
                rebalance(g, cfg, &mut units, &p, &next);
                p = next;
                boundary_history.push((step, p.boundaries()[1]));
            }
        }

        let unsettled: f64 = units
            .iter()
            .map(|u| u.solver.held_mass() + u.outgoing_mass)
            .sum();
        let bound = unsettled / (1.0 - damping);
        let converged = bound <= target;
        #[cfg(debug_assertions)]
        {
            let collected: f64 = units.iter().map(|u| u.solver.history().iter().sum::<f64>()).sum();
            debug_assert!(
                1.0 - collected <= bound + 1e-9,
                "error bound unsound at step {step}: 1 - |H| = {} > {bound}",
                1.0 - collected
            );
        }
        if !converged {
            for (u, idle) in units.iter_mut().zip(&idle_now) {
                u.idle += idle;
            }
        }
        for u in &units {
            trace.rows.push(TraceRow {
                step,
                unit: u.id,
                norm_cost: u.total_ops() as f64 / norm,
                bound: u.solver.residual() / (1.0 - damping),
                outgoing: u.outgoing_mass,
                idle_frac: u.idle_fraction(),
            });
        }
        trace.global.push(GlobalRow { step, bound, converged });

        if converged {
            let mut history = vec![0.0f64; n];
            for u in &units {
                let owned = u.solver.owned();
                history[owned].copy_from_slice(u.solver.history());
            }
            let converged_cost = units
                .iter()
                .map(|u| (u.total_ops() + u.idle) as f64)
                .fold(0.0f64, f64::max)
                / norm;
            return Ok(RunResult {
                history,
                trace,
                steps: step + 1,
                speed,
                converged_cost,
                unit_ops: units.iter().map(|u| u.total_ops()).collect(),
                unit_idle: units.iter().map(|u| u.idle).collect(),
                delivered_mass: delivered,
                boundary_history,
            });
        }
    }
    Err(SimError::MaxSteps { steps: cfg.max_steps })
}

/// Runs with a fixed partition until the global error bound reaches the
/// solver's target.
pub fn run(g: &Graph, cfg: &SimConfig) -> Result<RunResult, SimError> {
    drive(g, cfg, false)
}

/// Two-unit run that may move the interval boundary while running, guided
/// by the residual and operation-count imbalance.
pub fn run_adaptive(g: &Graph, cfg: &SimConfig) -> Result<RunResult, SimError> {
    drive(g, cfg, true)
}
