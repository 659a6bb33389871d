//! Finite-difference verification of every hand-derived gradient.
//!
//! Each analytic gradient is compared against central differences of a
//! surrogate in which detached factors (and, for attention, the routing
//! index) are frozen at the evaluation point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bbr_loss::{
    focusing_r, giou_loss, l1_yolov2, liou, monotonic_coefficient, outlier_degree, r_wiou, wiou_v1, wiou_v2,
    wiou_v3, LossResult, LossState, WiouConfig,
};
use crate::bra::{bra_backward, bra_forward, bra_forward_routed, BraConfig, BraParams, FeatureMap};
use crate::error::{Error, Result};
use crate::geometry::{center_dist_sq, enclosing_dims, BBox};
use crate::tensor::{finite_diff_grad, finite_diff_grad_array, Tensor, DEFAULT_FD_EPS};

pub const LOSS_OPS: [&str; 7] = ["l1", "iou", "giou", "r_wiou", "wiou1", "wiou2", "wiou3"];
pub const BRA_OP: &str = "bra_backward";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub cases: usize,
    pub seed: u64,
    pub eps: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            cases: 500,
            seed: 0,
            eps: DEFAULT_FD_EPS,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
        }
    }
}

impl GradcheckConfig {
    /// `|a - n| <= max(abs_tol, rel_tol * max(|a|, |n|))`.
    pub fn agrees(&self, analytic: f64, numeric: f64) -> bool {
        let diff = (analytic - numeric).abs();
        diff <= self.abs_tol.max(self.rel_tol * analytic.abs().max(numeric.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: String,
    pub cases: usize,
    pub components: usize,
    /// Draws rejected for lying within `2 eps` of a kink.
    pub excluded: usize,
    pub max_abs_err: f64,
    /// Over components whose magnitude exceeds the absolute floor.
    pub max_rel_err: f64,
    pub failures: usize,
}

impl OpReport {
    fn new(op: &str) -> Self {
        OpReport {
            op: op.to_string(),
            cases: 0,
            components: 0,
            excluded: 0,
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            failures: 0,
        }
    }

    fn record(&mut self, analytic: &[f64], numeric: &[f64], cfg: &GradcheckConfig) {
        self.cases += 1;
        let mut failed = false;
        for (&a, &n) in analytic.iter().zip(numeric) {
            self.components += 1;
            let diff = (a - n).abs();
            let scale = a.abs().max(n.abs());
            self.max_abs_err = self.max_abs_err.max(diff);
            if scale > cfg.abs_tol {
                self.max_rel_err = self.max_rel_err.max(diff / scale);
            }
            failed |= !cfg.agrees(a, n);
        }
        self.failures += failed as usize;
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub ops: Vec<OpReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(OpReport::passed)
    }

    pub fn op(&self, name: &str) -> Option<&OpReport> {
        self.ops.iter().find(|o| o.op == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("op,cases,components,excluded,max_abs_err,max_rel_err,failures\n");
        for o in &self.ops {
            out.push_str(&format!(
                "{},{},{},{},{:e},{:e},{}\n",
                o.op, o.cases, o.components, o.excluded, o.max_abs_err, o.max_rel_err, o.failures
            ));
        }
        out
    }
}

fn draw_box<R: Rng>(rng: &mut R) -> BBox<f64> {
    BBox::new(
        rng.gen_range(0.0..10.0),
        rng.gen_range(0.0..10.0),
        rng.gen_range(0.1..5.0),
        rng.gen_range(0.1..5.0),
    )
}

/// True when a perturbation of size `eps` in any anchor parameter can cross
/// an edge coincidence or a coordinate tie, where the losses are not smooth.
pub fn near_kink(anchor: BBox<f64>, target: BBox<f64>, eps: f64) -> bool {
    let (a, t) = (anchor.to_corners(), target.to_corners());
    let gap = 2.0 * eps;
    let edges = [(a.x1, a.x2, t.x1, t.x2), (a.y1, a.y2, t.y1, t.y2)];
    let edge_tie = edges.iter().any(|&(a1, a2, t1, t2)| {
        [a1 - t1, a2 - t2, a1 - t2, a2 - t1].iter().any(|d| d.abs() < gap)
    });
    let coord_tie = anchor
        .to_array()
        .iter()
        .zip(target.to_array())
        .any(|(x, y)| (x - y).abs() < gap);
    edge_tie || coord_tie
}

fn frozen_rwiou(p: &[f64; 4], target: BBox<f64>, diag_sq: f64) -> f64 {
    (center_dist_sq(BBox::from_array(*p), target) / diag_sq).exp()
}

fn frozen_wiou1(p: &[f64; 4], target: BBox<f64>, diag_sq: f64) -> f64 {
    frozen_rwiou(p, target, diag_sq) * liou(BBox::from_array(*p), target).value
}

/// Analytic gradient and the value-only surrogate it must match.
fn loss_case(
    op: &str,
    anchor: BBox<f64>,
    target: BBox<f64>,
    state: &LossState<f64>,
    wcfg: &WiouConfig<f64>,
    eps: f64,
) -> Result<([f64; 4], [f64; 4])> {
    let x = anchor.to_array();
    let diag_sq = enclosing_dims(anchor, target).diag_sq();
    let l_star = liou(anchor, target).value;
    let analytic: LossResult<f64>;
    let numeric = match op {
        "l1" => {
            analytic = l1_yolov2(anchor, target);
            finite_diff_grad_array(|p| l1_yolov2(BBox::from_array(*p), target).value, x, eps)?
        }
        "iou" => {
            analytic = liou(anchor, target);
            finite_diff_grad_array(|p| liou(BBox::from_array(*p), target).value, x, eps)?
        }
        "giou" => {
            analytic = giou_loss(anchor, target);
            finite_diff_grad_array(|p| giou_loss(BBox::from_array(*p), target).value, x, eps)?
        }
        "r_wiou" => {
            analytic = r_wiou(anchor, target);
            finite_diff_grad_array(|p| frozen_rwiou(p, target, diag_sq), x, eps)?
        }
        "wiou1" => {
            analytic = wiou_v1(anchor, target);
            finite_diff_grad_array(|p| frozen_wiou1(p, target, diag_sq), x, eps)?
        }
        "wiou2" => {
            analytic = wiou_v2(anchor, target, state, wcfg);
            let coef = monotonic_coefficient(l_star, state, wcfg);
            finite_diff_grad_array(|p| coef * frozen_wiou1(p, target, diag_sq), x, eps)?
        }
        "wiou3" => {
            analytic = wiou_v3(anchor, target, state, wcfg);
            let coef = focusing_r(outlier_degree(l_star, state), wcfg);
            finite_diff_grad_array(|p| coef * frozen_wiou1(p, target, diag_sq), x, eps)?
        }
        other => unreachable!("unknown loss op {other}"),
    };
    Ok((analytic.grad, numeric))
}

/// Checks one loss op on `cfg.cases` random non-kink pairs.
pub fn check_loss_op(op: &str, cfg: &GradcheckConfig) -> Result<OpReport> {
    let stream = LOSS_OPS
        .iter()
        .position(|&o| o == op)
        .ok_or_else(|| Error::Config(format!("no gradient check for '{op}'")))? as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let wcfg = WiouConfig::default();
    let mut report = OpReport::new(op);
    while report.cases < cfg.cases {
        let (anchor, target) = (draw_box(&mut rng), draw_box(&mut rng));
        let state = LossState::with_mean(rng.gen_range(0.1..1.0))?;
        if near_kink(anchor, target, cfg.eps) {
            report.excluded += 1;
            continue;
        }
        let (analytic, numeric) = loss_case(op, anchor, target, &state, &wcfg, cfg.eps)?;
        report.record(&analytic, &numeric, cfg);
    }
    Ok(report)
}

/// Shape of the attention gradient cases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BraCaseShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub regions_per_side: usize,
    pub top_k: usize,
    pub heads: usize,
}

impl Default for BraCaseShape {
    fn default() -> Self {
        BraCaseShape {
            height: 4,
            width: 4,
            channels: 4,
            regions_per_side: 2,
            top_k: 2,
            heads: 2,
        }
    }
}

fn random_tensor<R: Rng>(shape: Vec<usize>, rng: &mut R) -> Result<Tensor<f64>> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Objective `sum(G * bra(x, params))` with the routing index replayed.
fn weighted_output(
    fm: &FeatureMap<f64>,
    params: &BraParams<f64>,
    cfg: &BraConfig<f64>,
    routing: &crate::bra::RoutingIndex,
    weights: &FeatureMap<f64>,
) -> f64 {
    match bra_forward_routed(fm, params, cfg, routing) {
        Ok(out) => out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum(),
        Err(_) => f64::NAN,
    }
}

/// Checks attention gradients (input and all four projections) on random
/// maps, parameters and upstream gradients.
pub fn check_bra(shape: BraCaseShape, cfg: &GradcheckConfig) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(LOSS_OPS.len() as u64);
    let bcfg = BraConfig::new(shape.regions_per_side, shape.top_k, shape.channels, shape.heads)?;
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    let mut report = OpReport::new(BRA_OP);
    for _ in 0..cfg.cases {
        let fm = FeatureMap::new(random_tensor(vec![h, w, c], &mut rng)?)?;
        let params = BraParams::random(c, &mut rng)?;
        let upstream = FeatureMap::new(random_tensor(vec![h, w, c], &mut rng)?)?;
        let (_, routing) = bra_forward(&fm, &params, &bcfg)?;
        let grads = bra_backward(&fm, &params, &bcfg, Some(&routing), &upstream)?;

        let num_input = finite_diff_grad(
            |x| match FeatureMap::new(x.clone()) {
                Ok(m) => weighted_output(&m, &params, &bcfg, &routing, &upstream),
                Err(_) => f64::NAN,
            },
            fm.values(),
            cfg.eps,
        )?;
        let flat = Tensor::new(vec![4 * c * c], params.to_flat())?;
        let num_params = finite_diff_grad(
            |theta| match BraParams::from_flat(c, theta.data()) {
                Ok(p) => weighted_output(&fm, &p, &bcfg, &routing, &upstream),
                Err(_) => f64::NAN,
            },
            &flat,
            cfg.eps,
        )?;
        let mut analytic = grads.input.data().to_vec();
        analytic.extend(grads.params.to_flat());
        let mut numeric = num_input.into_data();
        numeric.extend(num_params.into_data());
        report.record(&analytic, &numeric, cfg);
    }
    Ok(report)
}

/// Every loss op, then the attention backward pass.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut ops = LOSS_OPS
        .iter()
        .map(|op| check_loss_op(op, cfg))
        .collect::<Result<Vec<_>>>()?;
    ops.push(check_bra(BraCaseShape::default(), cfg)?);
    Ok(GradcheckReport { config: *cfg, ops })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tolerance_rule() {
        let cfg = GradcheckConfig::default();
        assert!(cfg.agrees(0.0, 5e-8));
        assert!(!cfg.agrees(0.0, 2e-7));
        assert!(cfg.agrees(1.0, 1.0 + 5e-5));
        assert!(!cfg.agrees(1.0, 1.0 + 2e-4));
    }

    #[test]
    fn kink_detection() {
        let t = BBox::new(5.0, 5.0, 2.0, 2.0);
        assert!(near_kink(BBox::new(5.0, 3.3, 2.0, 1.0), t, 1e-5));
        assert!(near_kink(BBox::new(7.0 + 1e-6, 8.0, 2.0, 1.7), t, 1e-5));
        assert!(!near_kink(BBox::new(5.3, 3.3, 1.1, 1.7), t, 1e-5));
    }

    #[test]
    fn small_run_passes() {
        let cfg = GradcheckConfig {
            cases: 20,
            ..Default::default()
        };
        let report = run_gradcheck(&cfg).unwrap();
        assert_eq!(report.ops.len(), LOSS_OPS.len() + 1);
        for op in &report.ops {
            assert_eq!(op.cases, 20);
            assert!(op.passed(), "{op:?}");
        }
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let cfg = GradcheckConfig::default();
        let mut report = OpReport::new("probe");
        report.record(&[1.0, 2.0], &[1.0, 2.1], &cfg);
        assert_eq!(report.failures, 1);
        assert!((report.max_rel_err - 0.1 / 2.1).abs() < 1e-12);
    }
}
