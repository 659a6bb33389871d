//! Bounding-box regression losses with hand-derived gradients.
//!
//! Every loss returns its value together with the gradient with respect to the
//! anchor parameters `(cx, cy, w, h)`. Quantities marked as detached (the
//! enclosing-box diagonal inside the distance term, the focusing coefficients)
//! enter the value but are held constant in the gradient.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{center_dist_sq, enclosing_dims, interval_overlap, interval_span, BBox};
use crate::scalar::Scalar;

/// Lower clamp applied to the tracked mean of `L_IoU`.
pub const RUNNING_MEAN_FLOOR: f64 = 1e-8;

/// Hyperparameters of the Wise-IoU family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WiouConfig<T> {
    /// Base of the exponential in the non-monotonic coefficient; must exceed 1.
    pub alpha: T,
    /// Outlier degree at which the non-monotonic coefficient equals 1.
    pub delta: T,
    /// Exponent of the monotonic coefficient.
    pub gamma: T,
    /// Weight of the newest batch mean in the running-mean update, in (0, 1].
    pub momentum: T,
}

impl<T: Scalar> Default for WiouConfig<T> {
    fn default() -> Self {
        WiouConfig {
            alpha: T::of(1.9),
            delta: T::of(3.0),
            gamma: T::of(0.5),
            momentum: T::of(0.01),
        }
    }
}

impl<T: Scalar> WiouConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > T::one()) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be > 1, got {}", self.alpha)));
        }
        if !(self.delta > T::zero()) || !self.delta.is_finite() {
            return Err(Error::Config(format!("delta must be > 0, got {}", self.delta)));
        }
        if !(self.gamma > T::zero()) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.momentum > T::zero() && self.momentum <= T::one()) {
            return Err(Error::Config(format!(
                "momentum must lie in (0, 1], got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateStatus {
    Updated,
    /// The batch was empty and the state was left untouched.
    EmptyBatch,
}

/// Momentum-tracked mean of detached `L_IoU` values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossState<T> {
    running_mean: T,
    updates_seen: u64,
}

impl<T: Scalar> Default for LossState<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> LossState<T> {
    /// Fresh state with the running mean at 1.
    pub fn new() -> Self {
        LossState {
            running_mean: T::one(),
            updates_seen: 0,
        }
    }

    pub fn with_mean(mean: T) -> Result<Self> {
        if !(mean > T::zero()) || !mean.is_finite() {
            return Err(Error::Domain(format!("running mean must be positive, got {mean}")));
        }
        Ok(LossState {
            running_mean: mean,
            updates_seen: 0,
        })
    }

    pub fn running_mean(&self) -> T {
        self.running_mean
    }

    pub fn updates_seen(&self) -> u64 {
        self.updates_seen
    }

    /// Folds a batch of detached `L_IoU` values into the running mean:
    /// `mean <- (1 - m) mean + m batch_mean`, floored at [`RUNNING_MEAN_FLOOR`].
    pub fn update(&mut self, batch: &[T], momentum: T) -> UpdateStatus {
        if batch.is_empty() {
            log::warn!("running-mean update skipped: empty batch");
            return UpdateStatus::EmptyBatch;
        }
        let batch_mean = batch.iter().copied().sum::<T>() / T::from_count(batch.len());
        let next = (T::one() - momentum) * self.running_mean + momentum * batch_mean;
        self.running_mean = next.max(T::of(RUNNING_MEAN_FLOOR));
        self.updates_seen += 1;
        UpdateStatus::Updated
    }
}

/// Loss value and its gradient with respect to the anchor `(cx, cy, w, h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossResult<T> {
    pub value: T,
    pub grad: [T; 4],
}

impl<T: Scalar> LossResult<T> {
    fn scaled(self, s: T) -> Self {
        LossResult {
            value: self.value * s,
            grad: self.grad.map(|g| g * s),
        }
    }

    pub fn grad_norm(&self) -> T {
        self.grad.iter().map(|&g| g * g).sum::<T>().sqrt()
    }
}

/// Loss selector; the keywords are what the CLI and benchmark configs accept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossKind {
    L1,
    Iou,
    Giou,
    Wiou1,
    Wiou2,
    Wiou3,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::L1,
        LossKind::Iou,
        LossKind::Giou,
        LossKind::Wiou1,
        LossKind::Wiou2,
        LossKind::Wiou3,
    ];

    pub fn keyword(self) -> &'static str {
        match self {
            LossKind::L1 => "l1",
            LossKind::Iou => "iou",
            LossKind::Giou => "giou",
            LossKind::Wiou1 => "wiou1",
            LossKind::Wiou2 => "wiou2",
            LossKind::Wiou3 => "wiou3",
        }
    }

    /// Whether the loss reads the running mean (and so needs state updates).
    pub fn uses_state(self) -> bool {
        matches!(self, LossKind::Wiou2 | LossKind::Wiou3)
    }

    pub fn evaluate<T: Scalar>(
        self,
        anchor: BBox<T>,
        target: BBox<T>,
        state: &LossState<T>,
        cfg: &WiouConfig<T>,
    ) -> LossResult<T> {
        match self {
            LossKind::L1 => l1_yolov2(anchor, target),
            LossKind::Iou => liou(anchor, target),
            LossKind::Giou => giou_loss(anchor, target),
            LossKind::Wiou1 => wiou_v1(anchor, target),
            LossKind::Wiou2 => wiou_v2(anchor, target, state, cfg),
            LossKind::Wiou3 => wiou_v3(anchor, target, state, cfg),
        }
    }

    /// Parses a comma-separated keyword list such as `iou,wiou1,wiou3`.
    pub fn parse_list(s: &str) -> Result<Vec<LossKind>> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.keyword() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown loss '{s}' (expected one of l1, iou, giou, wiou1, wiou2, wiou3)"
                ))
            })
    }
}

/// Intersection and union areas with their partials in the anchor parameters.
struct Overlap<T> {
    inter: T,
    union: T,
    d_inter: [T; 4],
    d_union: [T; 4],
}

/// Overlap length on one axis for anchor `(c, e)` and target `(ct, et)`,
/// with its partials in the anchor's center and extent. Flat when disjoint.
fn axis_overlap<T: Scalar>(c: T, e: T, ct: T, et: T) -> (T, T, T) {
    let len = interval_overlap(c, e, ct, et);
    let partial = (e + et) / T::of(2.0) - (c - ct).abs();
    if len <= T::zero() {
        (T::zero(), T::zero(), T::zero())
    } else if len == partial {
        (len, -sign(c - ct), T::of(0.5))
    } else if len == e {
        // anchor inside target
        (len, T::zero(), T::one())
    } else {
        (len, T::zero(), T::zero())
    }
}

/// Enclosing extent on one axis with partials in the anchor's center and extent.
fn axis_span<T: Scalar>(c: T, e: T, ct: T, et: T) -> (T, T, T) {
    let len = interval_span(c, e, ct, et);
    let straddle = (e + et) / T::of(2.0) + (c - ct).abs();
    if len == straddle {
        (len, sign(c - ct), T::of(0.5))
    } else if len == e {
        (len, T::zero(), T::one())
    } else {
        (len, T::zero(), T::zero())
    }
}

fn overlap<T: Scalar>(a: BBox<T>, t: BBox<T>) -> Overlap<T> {
    let (iw, diw_dc, diw_dw) = axis_overlap(a.cx, a.w, t.cx, t.w);
    let (ih, dih_dc, dih_dh) = axis_overlap(a.cy, a.h, t.cy, t.h);
    let inter = iw * ih;
    let d_inter = [diw_dc * ih, dih_dc * iw, diw_dw * ih, dih_dh * iw];
    let union = a.area() + t.area() - inter;
    let d_union = [-d_inter[0], -d_inter[1], a.h - d_inter[2], a.w - d_inter[3]];
    Overlap {
        inter,
        union,
        d_inter,
        d_union,
    }
}

/// `1 - IoU`. The gradient is identically zero for strictly disjoint boxes.
pub fn liou<T: Scalar>(anchor: BBox<T>, target: BBox<T>) -> LossResult<T> {
    let ov = overlap(anchor, target);
    if ov.union <= T::zero() {
        return LossResult {
            value: T::one(),
            grad: [T::zero(); 4],
        };
    }
    let u2 = ov.union * ov.union;
    let mut grad = [T::zero(); 4];
    for (g, (&di, &du)) in grad.iter_mut().zip(ov.d_inter.iter().zip(&ov.d_union)) {
        *g = -(di * ov.union - ov.inter * du) / u2;
    }
    LossResult {
        value: T::one() - ov.inter / ov.union,
        grad,
    }
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Sum of absolute coordinate differences; subgradient 0 at ties.
pub fn l1_yolov2<T: Scalar>(anchor: BBox<T>, target: BBox<T>) -> LossResult<T> {
    let a = anchor.to_array();
    let t = target.to_array();
    let mut value = T::zero();
    let mut grad = [T::zero(); 4];
    for i in 0..4 {
        let d = a[i] - t[i];
        value += d.abs();
        grad[i] = sign(d);
    }
    LossResult { value, grad }
}

/// `2 - w_gt h_gt` for a target with normalized extents.
pub fn yolov3_scale_factor<T: Scalar>(target: BBox<T>) -> Result<T> {
    let unit = |v: T| v >= T::zero() && v <= T::one();
    if !unit(target.w) || !unit(target.h) {
        return Err(Error::Domain(format!(
            "normalized target extents must lie in [0, 1], got w={} h={}",
            target.w, target.h
        )));
    }
    Ok(T::of(2.0) - target.w * target.h)
}

/// `1 - IoU + (C - U) / C` with `C` the enclosing-box area.
pub fn giou_loss<T: Scalar>(anchor: BBox<T>, target: BBox<T>) -> LossResult<T> {
    let base = liou(anchor, target);
    let ov = overlap(anchor, target);
    let (wg, dwg_dc, dwg_dw) = axis_span(anchor.cx, anchor.w, target.cx, target.w);
    let (hg, dhg_dc, dhg_dh) = axis_span(anchor.cy, anchor.h, target.cy, target.h);
    let c = wg * hg;
    if c <= T::zero() || ov.union <= T::zero() {
        return base;
    }
    let d_c = [dwg_dc * hg, dhg_dc * wg, dwg_dw * hg, dhg_dh * wg];
    let c2 = c * c;
    let mut grad = base.grad;
    // d/dθ of (C - U) / C = -(dU C - U dC) / C^2
    for i in 0..4 {
        grad[i] -= (ov.d_union[i] * c - ov.union * d_c[i]) / c2;
    }
    LossResult {
        value: base.value + (c - ov.union) / c,
        grad,
    }
}

/// Distance attention `exp(d^2 / (W_g^2 + H_g^2)*)` with the denominator detached.
pub fn r_wiou<T: Scalar>(anchor: BBox<T>, target: BBox<T>) -> LossResult<T> {
    let diag_sq = enclosing_dims(anchor, target).diag_sq();
    if diag_sq <= T::zero() {
        return LossResult {
            value: T::one(),
            grad: [T::zero(); 4],
        };
    }
    let value = (center_dist_sq(anchor, target) / diag_sq).exp();
    let k = T::of(2.0) * value / diag_sq;
    LossResult {
        value,
        grad: [
            k * (anchor.cx - target.cx),
            k * (anchor.cy - target.cy),
            T::zero(),
            T::zero(),
        ],
    }
}

/// `R_WIoU * L_IoU`.
pub fn wiou_v1<T: Scalar>(anchor: BBox<T>, target: BBox<T>) -> LossResult<T> {
    let r = r_wiou(anchor, target);
    let l = liou(anchor, target);
    let mut grad = [T::zero(); 4];
    for i in 0..4 {
        grad[i] = r.value * l.grad[i] + l.value * r.grad[i];
    }
    LossResult {
        value: r.value * l.value,
        grad,
    }
}

/// Outlier degree `beta = L_IoU* / mean`. Carries no gradient.
pub fn outlier_degree<T: Scalar>(liou_detached: T, state: &LossState<T>) -> T {
    liou_detached / state.running_mean()
}

/// Monotonic coefficient `(L_IoU* / mean)^gamma`.
pub fn monotonic_coefficient<T: Scalar>(liou_detached: T, state: &LossState<T>, cfg: &WiouConfig<T>) -> T {
    outlier_degree(liou_detached, state).powf(cfg.gamma)
}

/// Wise-IoU v1 scaled by the detached monotonic coefficient.
pub fn wiou_v2<T: Scalar>(
    anchor: BBox<T>,
    target: BBox<T>,
    state: &LossState<T>,
    cfg: &WiouConfig<T>,
) -> LossResult<T> {
    let l_star = liou(anchor, target).value;
    wiou_v1(anchor, target).scaled(monotonic_coefficient(l_star, state, cfg))
}

/// Non-monotonic focusing coefficient `r = beta / (delta alpha^(beta - delta))`.
pub fn focusing_r<T: Scalar>(beta: T, cfg: &WiouConfig<T>) -> T {
    beta / (cfg.delta * cfg.alpha.powf(beta - cfg.delta))
}

/// Wise-IoU v1 scaled by the detached non-monotonic coefficient.
pub fn wiou_v3<T: Scalar>(
    anchor: BBox<T>,
    target: BBox<T>,
    state: &LossState<T>,
    cfg: &WiouConfig<T>,
) -> LossResult<T> {
    let beta = outlier_degree(liou(anchor, target).value, state);
    wiou_v1(anchor, target).scaled(focusing_r(beta, cfg))
}
