//! Box-fitting benchmark: gradient descent of a single anchor onto a target
//! under each regression loss, with seeded problem suites and CSV output.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bbr_loss::{liou, LossKind, LossState, WiouConfig};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// A fit succeeds once `L_IoU` drops below this.
pub const SUCCESS_LIOU: f64 = 0.05;
pub const DEFAULT_LR: f64 = 0.05;
pub const DEFAULT_MAX_ITERS: usize = 2000;
/// Fraction of suite problems whose initial anchor is disjoint from the target.
pub const DISJOINT_FRACTION: f64 = 0.3;

pub const RESULT_HEADER: &str = "problem_id,loss,converged,iters,final_liou";
pub const TRACE_HEADER: &str = "iter,loss,liou,cx,cy,w,h";
pub const SUMMARY_HEADER: &str = "loss,stratum,problems,successes,success_rate,median_iters,median_final_liou";

#[derive(Debug, Clone, PartialEq)]
pub struct FitProblem {
    pub anchor: BBox<f64>,
    pub target: BBox<f64>,
    pub loss: LossKind,
    pub lr: f64,
    pub max_iters: usize,
    pub wiou: WiouConfig<f64>,
}

impl FitProblem {
    pub fn validate(&self) -> Result<()> {
        let positive = |b: BBox<f64>| b.is_valid() && b.w > 0.0 && b.h > 0.0;
        if !positive(self.anchor) || !positive(self.target) {
            return Err(Error::Domain("anchor and target need finite centers and positive extents".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        self.wiou.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub loss: f64,
    pub liou: f64,
    pub anchor: BBox<f64>,
}

impl TraceRecord {
    pub fn to_csv_row(&self) -> String {
        let a = self.anchor;
        format!("{},{},{},{},{},{},{}", self.iter, self.loss, self.liou, a.cx, a.cy, a.w, a.h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    MaxIters,
    /// The loss or its gradient went non-finite; the trace ends at the last finite record.
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub trace: Vec<TraceRecord>,
    pub stop: StopReason,
}

impl FitOutcome {
    pub fn converged(&self) -> bool {
        self.stop == StopReason::Converged
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.trace.last()
    }

    pub fn trace_csv(&self) -> String {
        let mut out = format!("{TRACE_HEADER}\n");
        for r in &self.trace {
            out.push_str(&r.to_csv_row());
            out.push('\n');
        }
        out
    }
}

fn to_params(b: BBox<f64>) -> [f64; 4] {
    [b.cx, b.cy, b.w.ln(), b.h.ln()]
}

fn from_params(p: [f64; 4]) -> BBox<f64> {
    BBox::new(p[0], p[1], p[2].exp(), p[3].exp())
}

/// Steepest descent on `(cx, cy, ln w, ln h)`. Iteration 0 is the initial
/// anchor; the fit stops as soon as `L_IoU < SUCCESS_LIOU` or after
/// `max_iters` steps. Stateful losses see their running mean updated with the
/// single-sample batch after every evaluation.
pub fn run_fit(problem: &FitProblem) -> Result<FitOutcome> {
    problem.validate()?;
    let mut state = LossState::new();
    let mut params = to_params(problem.anchor);
    let mut trace = Vec::new();
    for iter in 0..=problem.max_iters {
        let anchor = from_params(params);
        let l_iou = liou(anchor, problem.target).value;
        let res = problem.loss.evaluate(anchor, problem.target, &state, &problem.wiou);
        let finite = anchor.is_valid() && res.value.is_finite() && res.grad.iter().all(|g| g.is_finite());
        if !finite {
            log::warn!(
                "{} fit aborted at iteration {iter}: non-finite loss {} at {anchor:?}",
                problem.loss,
                res.value
            );
            return Ok(FitOutcome {
                trace,
                stop: StopReason::NonFinite,
            });
        }
        trace.push(TraceRecord {
            iter,
            loss: res.value,
            liou: l_iou,
            anchor,
        });
        if l_iou < SUCCESS_LIOU {
            return Ok(FitOutcome {
                trace,
                stop: StopReason::Converged,
            });
        }
        if iter == problem.max_iters {
            break;
        }
        if problem.loss.uses_state() {
            state.update(&[l_iou], problem.wiou.momentum);
        }
        let g = [res.grad[0], res.grad[1], res.grad[2] * anchor.w, res.grad[3] * anchor.h];
        for (p, gi) in params.iter_mut().zip(g) {
            *p -= problem.lr * gi;
        }
    }
    Ok(FitOutcome {
        trace,
        stop: StopReason::MaxIters,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stratum {
    Overlapping,
    Disjoint,
}

impl Stratum {
    pub fn name(self) -> &'static str {
        match self {
            Stratum::Overlapping => "overlapping",
            Stratum::Disjoint => "disjoint",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteProblem {
    pub id: usize,
    pub stratum: Stratum,
    pub anchor: BBox<f64>,
    pub target: BBox<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub n_problems: usize,
    pub seed: u64,
    pub losses: Vec<LossKind>,
    pub lr: f64,
    pub max_iters: usize,
    pub wiou: WiouConfig<f64>,
}

impl SuiteConfig {
    pub fn new(n_problems: usize, seed: u64, losses: Vec<LossKind>) -> Self {
        SuiteConfig {
            n_problems,
            seed,
            losses,
            lr: DEFAULT_LR,
            max_iters: DEFAULT_MAX_ITERS,
            wiou: WiouConfig::default(),
        }
    }

    /// `# key=value` lines describing every setting that affects the output.
    pub fn header_lines(&self) -> String {
        let losses: Vec<&str> = self.losses.iter().map(|l| l.keyword()).collect();
        format!(
            "# n_problems={}\n# seed={}\n# losses={}\n# lr={}\n# max_iters={}\n# success_liou={}\n\
             # disjoint_fraction={}\n# alpha={}\n# delta={}\n# gamma={}\n# momentum={}\n",
            self.n_problems,
            self.seed,
            losses.join(","),
            self.lr,
            self.max_iters,
            SUCCESS_LIOU,
            DISJOINT_FRACTION,
            self.wiou.alpha,
            self.wiou.delta,
            self.wiou.gamma,
            self.wiou.momentum
        )
    }
}

fn draw_box<R: Rng>(rng: &mut R) -> BBox<f64> {
    BBox::new(
        rng.gen_range(0.0..10.0),
        rng.gen_range(0.0..10.0),
        rng.gen_range(0.5..4.0),
        rng.gen_range(0.5..4.0),
    )
}

/// Seeded problem set: targets in `[0, 10]^2` with extents in `[0.5, 4]`.
/// Exactly `floor(n * DISJOINT_FRACTION)` anchors are strictly disjoint from
/// their target; the rest overlap it with positive area.
pub fn generate_problems(n_problems: usize, seed: u64) -> Vec<SuiteProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_disjoint = (n_problems as f64 * DISJOINT_FRACTION).floor() as usize;
    let mut strata: Vec<Stratum> = (0..n_problems)
        .map(|i| if i < n_disjoint { Stratum::Disjoint } else { Stratum::Overlapping })
        .collect();
    strata.shuffle(&mut rng);
    strata
        .into_iter()
        .enumerate()
        .map(|(id, stratum)| {
            let target = draw_box(&mut rng);
            let w = rng.gen_range(0.5..4.0);
            let h = rng.gen_range(0.5..4.0);
            let reach_x = (w + target.w) / 2.0;
            let reach_y = (h + target.h) / 2.0;
            let anchor = match stratum {
                Stratum::Overlapping => loop {
                    let dx = rng.gen_range(-0.9..0.9) * reach_x;
                    let dy = rng.gen_range(-0.9..0.9) * reach_y;
                    let a = BBox::new(target.cx + dx, target.cy + dy, w, h);
                    if iou(a, target) > 0.0 {
                        break a;
                    }
                },
                Stratum::Disjoint => {
                    // separated along one axis by a positive gap
                    let gap = rng.gen_range(0.1..3.0);
                    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    if rng.gen_bool(0.5) {
                        let dy = rng.gen_range(-1.0..1.0) * (reach_y + 2.0);
                        BBox::new(target.cx + side * (reach_x + gap), target.cy + dy, w, h)
                    } else {
                        let dx = rng.gen_range(-1.0..1.0) * (reach_x + 2.0);
                        BBox::new(target.cx + dx, target.cy + side * (reach_y + gap), w, h)
                    }
                }
            };
            SuiteProblem {
                id,
                stratum,
                anchor,
                target,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub problem_id: usize,
    pub stratum: Stratum,
    pub loss: LossKind,
    pub converged: bool,
    /// Steps taken to reach the threshold; `max_iters` when it was not reached.
    pub iters: usize,
    pub final_liou: f64,
}

impl SuiteRow {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.problem_id,
            self.loss,
            self.converged as u8,
            self.iters,
            self.final_liou
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub loss: LossKind,
    /// `None` aggregates both strata.
    pub stratum: Option<Stratum>,
    pub problems: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub median_iters: f64,
    pub median_final_liou: f64,
}

impl SummaryRow {
    pub fn stratum_name(&self) -> &'static str {
        self.stratum.map_or("all", Stratum::name)
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.loss,
            self.stratum_name(),
            self.problems,
            self.successes,
            self.success_rate,
            self.median_iters,
            self.median_final_liou
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub config: SuiteConfig,
    pub problems: Vec<SuiteProblem>,
    /// Problem-major, losses in configured order.
    pub rows: Vec<SuiteRow>,
    pub summary: Vec<SummaryRow>,
}

impl SuiteReport {
    pub fn results_csv(&self) -> String {
        let mut out = self.config.header_lines();
        writeln!(out, "{RESULT_HEADER}").unwrap();
        for r in &self.rows {
            writeln!(out, "{}", r.to_csv_row()).unwrap();
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = self.config.header_lines();
        writeln!(out, "{SUMMARY_HEADER}").unwrap();
        for r in &self.summary {
            writeln!(out, "{}", r.to_csv_row()).unwrap();
        }
        out
    }

    pub fn summary_for(&self, loss: LossKind, stratum: Option<Stratum>) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.loss == loss && r.stratum == stratum)
    }
}

/// Median of the values; the mean of the two middle values for even counts.
pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

fn summarize_rows(rows: &[&SuiteRow], loss: LossKind, stratum: Option<Stratum>) -> SummaryRow {
    let successes = rows.iter().filter(|r| r.converged).count();
    let mut iters: Vec<f64> = rows.iter().map(|r| r.iters as f64).collect();
    let mut finals: Vec<f64> = rows.iter().map(|r| r.final_liou).collect();
    SummaryRow {
        loss,
        stratum,
        problems: rows.len(),
        successes,
        success_rate: if rows.is_empty() {
            0.0
        } else {
            successes as f64 / rows.len() as f64
        },
        median_iters: median(&mut iters),
        median_final_liou: median(&mut finals),
    }
}

/// Runs every problem under every loss. Problems run in parallel; rows are
/// assembled in problem order, so the report does not depend on thread count.
pub fn run_suite(config: &SuiteConfig) -> Result<SuiteReport> {
    if config.n_problems == 0 {
        return Err(Error::Config("n_problems must be at least 1".into()));
    }
    if config.losses.is_empty() {
        return Err(Error::Config("no losses selected".into()));
    }
    let problems = generate_problems(config.n_problems, config.seed);
    let per_problem: Vec<Result<Vec<SuiteRow>>> = problems
        .par_iter()
        .map(|p| {
            config
                .losses
                .iter()
                .map(|&loss| {
                    let outcome = run_fit(&FitProblem {
                        anchor: p.anchor,
                        target: p.target,
                        loss,
                        lr: config.lr,
                        max_iters: config.max_iters,
                        wiou: config.wiou,
                    })?;
                    let last = outcome.last().copied();
                    Ok(SuiteRow {
                        problem_id: p.id,
                        stratum: p.stratum,
                        loss,
                        converged: outcome.converged(),
                        iters: match (outcome.stop, last) {
                            (StopReason::Converged, Some(r)) => r.iter,
                            _ => config.max_iters,
                        },
                        final_liou: last.map_or(f64::NAN, |r| r.liou),
                    })
                })
                .collect()
        })
        .collect();
    let mut rows = Vec::with_capacity(config.n_problems * config.losses.len());
    for r in per_problem {
        rows.extend(r?);
    }
    let mut summary = Vec::new();
    for &loss in &config.losses {
        for stratum in [Some(Stratum::Overlapping), Some(Stratum::Disjoint), None] {
            let sel: Vec<&SuiteRow> = rows
                .iter()
                .filter(|r| r.loss == loss && stratum.map_or(true, |s| r.stratum == s))
                .collect();
            summary.push(summarize_rows(&sel, loss, stratum));
        }
    }
    Ok(SuiteReport {
        config: config.clone(),
        problems,
        rows,
        summary,
    })
}
