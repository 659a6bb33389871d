//! Bi-level routing attention over 2-D feature maps.
//!
//! The map is cut into `S x S` regions. Queries and keys are mean-pooled per
//! region, a region-to-region adjacency `Qr Kr^T` is formed, and every region
//! keeps the `k` highest-scoring partner regions. Token-to-token attention
//! then runs between each region's queries and the keys/values gathered from
//! its routed regions only.
//!
//! Routing is a hard selection and is treated as a constant by
//! [`bra_backward`]; gradients flow through the gathered keys/values and the
//! attention itself.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BraConfig<T> {
    /// Regions per side `S`; the map is split into `S^2` regions.
    pub regions_per_side: usize,
    /// Routed regions per source region, `1 <= k <= S^2`.
    pub top_k: usize,
    pub embed_dim: usize,
    pub heads: usize,
    /// Logit temperature applied to `Q K^T`.
    pub scale: T,
}

impl<T: Scalar> BraConfig<T> {
    /// Config with the default scale `1 / sqrt(C / H)`.
    pub fn new(regions_per_side: usize, top_k: usize, embed_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || embed_dim == 0 || embed_dim % heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {embed_dim} must be a positive multiple of heads {heads}"
            )));
        }
        let cfg = BraConfig {
            regions_per_side,
            top_k,
            embed_dim,
            heads,
            scale: T::one() / T::from_count(embed_dim / heads).sqrt(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_scale(mut self, scale: T) -> Self {
        self.scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.regions_per_side == 0 {
            return Err(Error::Config("regions_per_side must be positive".into()));
        }
        let n = self.num_regions();
        if self.top_k == 0 || self.top_k > n {
            return Err(Error::Config(format!(
                "top_k must lie in [1, {n}], got {}",
                self.top_k
            )));
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !self.scale.is_finite() {
            return Err(Error::Config("attention scale must be finite".into()));
        }
        Ok(())
    }

    pub fn num_regions(&self) -> usize {
        self.regions_per_side * self.regions_per_side
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// `height x width x channels` feature map stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    values: Tensor<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(Error::shape(format!(
                "feature map must be H x W x C, got {:?}",
                values.shape()
            )));
        }
        Ok(FeatureMap { values })
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        Self::new(Tensor::new(vec![height, width, channels], data)?)
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(Tensor::zeros(vec![height, width, channels])?)
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn data(&self) -> &[T] {
        self.values.data()
    }

    pub fn into_values(self) -> Tensor<T> {
        self.values
    }

    /// Text form: a header line `H W C`, then the `H*W*C` values row-major,
    /// one pixel (all channels) per line.
    pub fn to_text(&self) -> String {
        let c = self.channels();
        let mut out = format!("{} {} {}\n", self.height(), self.width(), c);
        for px in self.data().chunks(c) {
            let line: Vec<String> = px.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    /// Parses [`FeatureMap::to_text`] output; any whitespace layout is accepted.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut tokens = text.split_whitespace();
        let mut dim = |name: &str| -> Result<usize> {
            let tok = tokens
                .next()
                .ok_or_else(|| Error::shape(format!("feature map header missing {name}")))?;
            tok.parse::<usize>()
                .map_err(|_| Error::shape(format!("feature map header field {name} is not an integer: '{tok}'")))
        };
        let (h, w, c) = (dim("height")?, dim("width")?, dim("channels")?);
        let data = tokens
            .enumerate()
            .map(|(i, tok)| {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| Error::shape(format!("value #{i} is not a number: '{tok}'")))?;
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("value #{i} in feature map")));
                }
                Ok(T::of(v))
            })
            .collect::<Result<Vec<T>>>()?;
        Self::from_vec(h, w, c, data)
    }
}

/// Query/key/value/output projections, each `C x C`, applied as `X W`.
#[derive(Debug, Clone, PartialEq)]
pub struct BraParams<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

impl<T: Scalar> BraParams<T> {
    pub fn new(wq: Tensor<T>, wk: Tensor<T>, wv: Tensor<T>, wo: Tensor<T>) -> Result<Self> {
        let c = wq.shape().first().copied().unwrap_or(0);
        let p = BraParams { wq, wk, wv, wo };
        p.validate(c)?;
        Ok(p)
    }

    pub fn identity(channels: usize) -> Result<Self> {
        let i = Tensor::identity(channels)?;
        Ok(BraParams {
            wq: i.clone(),
            wk: i.clone(),
            wv: i.clone(),
            wo: i,
        })
    }

    pub fn zeros(channels: usize) -> Result<Self> {
        let z = Tensor::zeros(vec![channels, channels])?;
        Ok(BraParams {
            wq: z.clone(),
            wk: z.clone(),
            wv: z.clone(),
            wo: z,
        })
    }

    /// Entries drawn uniformly from `[-1/sqrt(C), 1/sqrt(C)]`.
    pub fn random<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (channels as f64).sqrt();
        let mut draw = || -> Result<Tensor<T>> {
            let data = (0..channels * channels)
                .map(|_| T::of(rng.gen_range(-bound..=bound)))
                .collect();
            Tensor::matrix(channels, channels, data)
        };
        Ok(BraParams {
            wq: draw()?,
            wk: draw()?,
            wv: draw()?,
            wo: draw()?,
        })
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        for (name, w) in self.iter() {
            if w.shape() != [channels, channels] {
                return Err(Error::shape(format!(
                    "{name} must be {channels}x{channels}, got {:?}",
                    w.shape()
                )));
            }
            if !w.is_finite() {
                return Err(Error::NonFinite(format!("projection {name}")));
            }
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &Tensor<T>)> {
        [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)].into_iter()
    }

    /// All four matrices concatenated in `wq, wk, wv, wo` order.
    pub fn to_flat(&self) -> Vec<T> {
        self.iter().flat_map(|(_, w)| w.data().iter().copied()).collect()
    }

    pub fn from_flat(channels: usize, flat: &[T]) -> Result<Self> {
        let n = channels * channels;
        if flat.len() != 4 * n {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                4 * n,
                flat.len()
            )));
        }
        let m = |i: usize| Tensor::matrix(channels, channels, flat[i * n..(i + 1) * n].to_vec());
        Ok(BraParams {
            wq: m(0)?,
            wk: m(1)?,
            wv: m(2)?,
            wo: m(3)?,
        })
    }
}

/// For each source region, its routed regions in selection order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingIndex {
    rows: Vec<Vec<usize>>,
}

impl RoutingIndex {
    /// Builds an index after checking every row has `k` unique in-range entries.
    pub fn new(rows: Vec<Vec<usize>>) -> Result<Self> {
        let n = rows.len();
        let k = rows.first().map(Vec::len).unwrap_or(0);
        if n == 0 || k == 0 {
            return Err(Error::Config("routing index must be non-empty".into()));
        }
        for (r, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Config(format!("routing row {r} has {} entries, expected {k}", row.len())));
            }
            let mut seen = vec![false; n];
            for &j in row {
                if j >= n {
                    return Err(Error::Index { index: j, extent: n });
                }
                if std::mem::replace(&mut seen[j], true) {
                    return Err(Error::Config(format!("routing row {r} repeats region {j}")));
                }
            }
        }
        Ok(RoutingIndex { rows })
    }

    pub fn num_regions(&self) -> usize {
        self.rows.len()
    }

    pub fn k(&self) -> usize {
        self.rows[0].len()
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.rows[r]
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    /// One line per source region: `region: routed...`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (r, row) in self.rows.iter().enumerate() {
            let ids: Vec<String> = row.iter().map(usize::to_string).collect();
            out.push_str(&format!("{r}: {}\n", ids.join(" ")));
        }
        out
    }
}

fn check_divisible<T: Scalar>(fm: &FeatureMap<T>, s: usize) -> Result<()> {
    if s == 0 || fm.height() % s != 0 || fm.width() % s != 0 {
        return Err(Error::shape(format!(
            "{}x{} map cannot be split into {s}x{s} regions",
            fm.height(),
            fm.width()
        )));
    }
    Ok(())
}

/// Splits the map into `S^2` regions of `T = (H/S)(W/S)` tokens: `[S^2, T, C]`.
/// Region `(i, j)` has index `i S + j`; tokens within it are row-major.
pub fn partition_regions<T: Scalar>(fm: &FeatureMap<T>, s: usize) -> Result<Tensor<T>> {
    check_divisible(fm, s)?;
    let (w, c) = (fm.width(), fm.channels());
    let (bh, bw) = (fm.height() / s, w / s);
    let src = fm.data();
    let mut data = Vec::with_capacity(src.len());
    for i in 0..s {
        for j in 0..s {
            for y in 0..bh {
                let row = i * bh + y;
                let start = (row * w + j * bw) * c;
                data.extend_from_slice(&src[start..start + bw * c]);
            }
        }
    }
    Tensor::new(vec![s * s, bh * bw, c], data)
}

/// Inverse of [`partition_regions`].
pub fn unpartition_regions<T: Scalar>(
    regions: &Tensor<T>,
    height: usize,
    width: usize,
    s: usize,
) -> Result<FeatureMap<T>> {
    let shape = regions.shape();
    if shape.len() != 3 || s == 0 || shape[0] != s * s || height % s != 0 || width % s != 0 {
        return Err(Error::shape(format!(
            "cannot unpartition {shape:?} into {height}x{width} with S={s}"
        )));
    }
    let (bh, bw, c) = (height / s, width / s, shape[2]);
    if shape[1] != bh * bw {
        return Err(Error::shape(format!(
            "region holds {} tokens, expected {}",
            shape[1],
            bh * bw
        )));
    }
    let mut data = vec![T::zero(); height * width * c];
    for i in 0..s {
        for j in 0..s {
            let block = regions.row(i * s + j);
            for y in 0..bh {
                let dst = ((i * bh + y) * width + j * bw) * c;
                data[dst..dst + bw * c].copy_from_slice(&block[y * bw * c..(y + 1) * bw * c]);
            }
        }
    }
    FeatureMap::from_vec(height, width, c, data)
}

/// Linear maps `Q = X Wq`, `K = X Wk`, `V = X Wv` for tokens `X: [N, C]`.
pub fn project_qkv<T: Scalar>(
    tokens: &Tensor<T>,
    params: &BraParams<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    Ok((
        tokens.matmul(&params.wq)?,
        tokens.matmul(&params.wk)?,
        tokens.matmul(&params.wv)?,
    ))
}

/// Mean over the token axis of `[S^2, T, C]`, giving `[S^2, C]`.
pub fn region_reps<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::shape(format!("region_reps expects [R, T, C], got {shape:?}")));
    }
    let (nr, nt, c) = (shape[0], shape[1], shape[2]);
    let inv = T::one() / T::from_count(nt);
    let mut out = Vec::with_capacity(nr * c);
    for r in 0..nr {
        let block = x.row(r);
        let mut acc = vec![T::zero(); c];
        for tok in block.chunks(c) {
            for (a, &v) in acc.iter_mut().zip(tok) {
                *a += v;
            }
        }
        out.extend(acc.into_iter().map(|a| a * inv));
    }
    Tensor::matrix(nr, c, out)
}

/// Region affinity `A = Qr Kr^T`; row = source region, column = candidate.
pub fn region_adjacency<T: Scalar>(qr: &Tensor<T>, kr: &Tensor<T>) -> Result<Tensor<T>> {
    qr.matmul(&kr.transpose()?)
}

/// Per row, the `k` largest entries ordered by value (descending), ties by
/// ascending column index.
pub fn topk_routing<T: Scalar>(adjacency: &Tensor<T>, k: usize) -> Result<RoutingIndex> {
    let shape = adjacency.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::shape(format!("adjacency must be square, got {shape:?}")));
    }
    let n = shape[0];
    if k == 0 || k > n {
        return Err(Error::Config(format!("top_k must lie in [1, {n}], got {k}")));
    }
    let rows = (0..n)
        .map(|r| {
            let row = adjacency.row(r);
            let mut idx: Vec<usize> = (0..n).collect();
            // stable sort keeps ascending index among equal values
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
            idx.truncate(k);
            idx
        })
        .collect();
    RoutingIndex::new(rows)
}

/// For every source region, the key and value tokens of its routed regions,
/// concatenated in routing order: `[k T, C]` each.
pub fn gather_kv<T: Scalar>(
    keys: &Tensor<T>,
    values: &Tensor<T>,
    routing: &RoutingIndex,
) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
    (0..routing.num_regions())
        .map(|r| gather_region(keys, values, routing.row(r)))
        .collect()
}

fn gather_region<T: Scalar>(
    keys: &Tensor<T>,
    values: &Tensor<T>,
    routed: &[usize],
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (nt, c) = (keys.shape()[1], keys.shape()[2]);
    let m = routed.len() * nt;
    Ok((
        keys.gather_rows(routed)?.reshape(vec![m, c])?,
        values.gather_rows(routed)?.reshape(vec![m, c])?,
    ))
}

/// Per-head attention weights `softmax(scale Q_h K_h^T)`, each `[T, M]`.
pub fn attention_weights<T: Scalar>(
    q: &Tensor<T>,
    kg: &Tensor<T>,
    cfg: &BraConfig<T>,
) -> Result<Vec<Tensor<T>>> {
    let dh = cfg.head_dim();
    (0..cfg.heads)
        .map(|h| {
            let qh = q.slice_cols(h * dh, dh)?;
            let kh = kg.slice_cols(h * dh, dh)?;
            qh.matmul(&kh.transpose()?)?.scale(cfg.scale).softmax_rows()
        })
        .collect()
}

/// Multi-head attention of `q: [T, C]` over `kg, vg: [M, C]`, heads
/// concatenated on channels and passed through `wo`.
pub fn token_attention<T: Scalar>(
    q: &Tensor<T>,
    kg: &Tensor<T>,
    vg: &Tensor<T>,
    wo: &Tensor<T>,
    cfg: &BraConfig<T>,
) -> Result<Tensor<T>> {
    Ok(attend_heads(q, kg, vg, cfg)?.0.matmul(wo)?)
}

/// Concatenated head outputs before the output projection, plus the
/// per-head attention weights.
fn attend_heads<T: Scalar>(
    q: &Tensor<T>,
    kg: &Tensor<T>,
    vg: &Tensor<T>,
    cfg: &BraConfig<T>,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    if q.shape().len() != 2 || kg.shape() != vg.shape() || kg.shape().len() != 2 {
        return Err(Error::shape(format!(
            "token attention shapes disagree: q {:?}, k {:?}, v {:?}",
            q.shape(),
            kg.shape(),
            vg.shape()
        )));
    }
    if q.shape()[1] != cfg.embed_dim || kg.shape()[1] != cfg.embed_dim {
        return Err(Error::shape(format!(
            "token attention expects {} channels, got q {:?}, k {:?}",
            cfg.embed_dim,
            q.shape(),
            kg.shape()
        )));
    }
    let dh = cfg.head_dim();
    let probs = attention_weights(q, kg, cfg)?;
    let mut out = Tensor::zeros(vec![q.shape()[0], cfg.embed_dim])?;
    for (h, p) in probs.iter().enumerate() {
        out.set_cols(h * dh, &p.matmul(&vg.slice_cols(h * dh, dh)?)?)?;
    }
    Ok((out, probs))
}

/// Region-ordered tokens and their projections.
struct Projected<T> {
    tokens: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
}

fn check_inputs<T: Scalar>(fm: &FeatureMap<T>, params: &BraParams<T>, cfg: &BraConfig<T>) -> Result<()> {
    cfg.validate()?;
    if fm.channels() != cfg.embed_dim {
        return Err(Error::shape(format!(
            "map has {} channels but embed_dim is {}",
            fm.channels(),
            cfg.embed_dim
        )));
    }
    check_divisible(fm, cfg.regions_per_side)?;
    params.validate(cfg.embed_dim)
}

fn project<T: Scalar>(fm: &FeatureMap<T>, params: &BraParams<T>, cfg: &BraConfig<T>) -> Result<Projected<T>> {
    check_inputs(fm, params, cfg)?;
    let regions = partition_regions(fm, cfg.regions_per_side)?;
    let shape = regions.shape().to_vec();
    let tokens = regions.reshape(vec![shape[0] * shape[1], shape[2]])?;
    let (q, k, v) = project_qkv(&tokens, params)?;
    Ok(Projected {
        tokens,
        q: q.reshape(shape.clone())?,
        k: k.reshape(shape.clone())?,
        v: v.reshape(shape)?,
    })
}

fn route<T: Scalar>(p: &Projected<T>, cfg: &BraConfig<T>) -> Result<RoutingIndex> {
    let adjacency = region_adjacency(&region_reps(&p.q)?, &region_reps(&p.k)?)?;
    topk_routing(&adjacency, cfg.top_k)
}

fn check_routing<T: Scalar>(routing: &RoutingIndex, cfg: &BraConfig<T>) -> Result<()> {
    if routing.num_regions() != cfg.num_regions() || routing.k() != cfg.top_k {
        return Err(Error::Config(format!(
            "routing covers {} regions with k={}, config expects {} with k={}",
            routing.num_regions(),
            routing.k(),
            cfg.num_regions(),
            cfg.top_k
        )));
    }
    Ok(())
}

fn region_queries<T: Scalar>(q: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (nt, c) = (q.shape()[1], q.shape()[2]);
    q.row_block(r, 1)?.reshape(vec![nt, c])
}

fn attend_routed<T: Scalar>(
    fm: &FeatureMap<T>,
    p: &Projected<T>,
    params: &BraParams<T>,
    cfg: &BraConfig<T>,
    routing: &RoutingIndex,
) -> Result<FeatureMap<T>> {
    let outputs = (0..cfg.num_regions())
        .into_par_iter()
        .map(|r| {
            let (kg, vg) = gather_region(&p.k, &p.v, routing.row(r))?;
            token_attention(&region_queries(&p.q, r)?, &kg, &vg, &params.wo, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let data: Vec<T> = outputs.into_iter().flat_map(Tensor::into_data).collect();
    let regions = Tensor::new(p.q.shape().to_vec(), data)?;
    unpartition_regions(&regions, fm.height(), fm.width(), cfg.regions_per_side)
}

/// Full forward pass. Output has the input's shape; the routing index is
/// returned for inspection or replay.
pub fn bra_forward<T: Scalar>(
    fm: &FeatureMap<T>,
    params: &BraParams<T>,
    cfg: &BraConfig<T>,
) -> Result<(FeatureMap<T>, RoutingIndex)> {
    let p = project(fm, params, cfg)?;
    let routing = route(&p, cfg)?;
    let out = attend_routed(fm, &p, params, cfg, &routing)?;
    Ok((out, routing))
}

/// Forward pass with a fixed routing index instead of the computed one.
pub fn bra_forward_routed<T: Scalar>(
    fm: &FeatureMap<T>,
    params: &BraParams<T>,
    cfg: &BraConfig<T>,
    routing: &RoutingIndex,
) -> Result<FeatureMap<T>> {
    check_routing(routing, cfg)?;
    let p = project(fm, params, cfg)?;
    attend_routed(fm, &p, params, cfg, routing)
}

/// Gradients of a scalar objective with respect to the input map and the
/// four projections.
#[derive(Debug, Clone, PartialEq)]
pub struct BraGrads<T> {
    pub input: FeatureMap<T>,
    pub params: BraParams<T>,
}

struct RegionGrads<T> {
    dq: Tensor<T>,
    dkg: Tensor<T>,
    dvg: Tensor<T>,
    dwo: Tensor<T>,
}

/// `dS = P ∘ (dP - rowsum(dP ∘ P))` for a row-wise softmax.
fn softmax_backward<T: Scalar>(p: &Tensor<T>, dp: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = (p.shape()[0], p.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let (pr, dr) = (p.row(i), dp.row(i));
        let dot = pr.iter().zip(dr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        for j in 0..n {
            out[i * n + j] = pr[j] * (dr[j] - dot);
        }
    }
    Tensor::matrix(m, n, out)
}

fn region_backward<T: Scalar>(
    q: &Tensor<T>,
    kg: &Tensor<T>,
    vg: &Tensor<T>,
    dy: &Tensor<T>,
    params: &BraParams<T>,
    cfg: &BraConfig<T>,
) -> Result<RegionGrads<T>> {
    let (heads_out, probs) = attend_heads(q, kg, vg, cfg)?;
    let dwo = heads_out.transpose()?.matmul(dy)?;
    let d_heads = dy.matmul(&params.wo.transpose()?)?;
    let dh = cfg.head_dim();
    let mut dq = Tensor::zeros(q.shape().to_vec())?;
    let mut dkg = Tensor::zeros(kg.shape().to_vec())?;
    let mut dvg = Tensor::zeros(vg.shape().to_vec())?;
    for (h, p) in probs.iter().enumerate() {
        let off = h * dh;
        let (qh, kh, vh) = (q.slice_cols(off, dh)?, kg.slice_cols(off, dh)?, vg.slice_cols(off, dh)?);
        let doh = d_heads.slice_cols(off, dh)?;
        let dp = doh.matmul(&vh.transpose()?)?;
        dvg.set_cols(off, &p.transpose()?.matmul(&doh)?)?;
        let ds = softmax_backward(p, &dp)?.scale(cfg.scale);
        dq.set_cols(off, &ds.matmul(&kh)?)?;
        dkg.set_cols(off, &ds.transpose()?.matmul(&qh)?)?;
    }
    Ok(RegionGrads { dq, dkg, dvg, dwo })
}

/// Backward pass for an upstream gradient on the output map. Routing is a
/// constant: pass the forward's index to replay it, or `None` to recompute.
pub fn bra_backward<T: Scalar>(
    fm: &FeatureMap<T>,
    params: &BraParams<T>,
    cfg: &BraConfig<T>,
    routing: Option<&RoutingIndex>,
    upstream: &FeatureMap<T>,
) -> Result<BraGrads<T>> {
    if upstream.values().shape() != fm.values().shape() {
        return Err(Error::shape(format!(
            "upstream gradient {:?} does not match input {:?}",
            upstream.values().shape(),
            fm.values().shape()
        )));
    }
    let p = project(fm, params, cfg)?;
    let computed;
    let routing = match routing {
        Some(r) => {
            check_routing(r, cfg)?;
            r
        }
        None => {
            computed = route(&p, cfg)?;
            &computed
        }
    };
    let s = cfg.regions_per_side;
    let dy = partition_regions(upstream, s)?;
    let per_region = (0..cfg.num_regions())
        .into_par_iter()
        .map(|r| {
            let (kg, vg) = gather_region(&p.k, &p.v, routing.row(r))?;
            let dy_r = region_queries(&dy, r)?;
            region_backward(&region_queries(&p.q, r)?, &kg, &vg, &dy_r, params, cfg)
        })
        .collect::<Result<Vec<_>>>()?;

    // Ordered reduction: region index, then routing position.
    let shape = p.q.shape().to_vec();
    let (nt, c) = (shape[1], shape[2]);
    let mut dq = Vec::with_capacity(p.q.len());
    let mut dk = Tensor::zeros(shape.clone())?;
    let mut dv = Tensor::zeros(shape.clone())?;
    let mut dwo = Tensor::zeros(vec![c, c])?;
    for (r, g) in per_region.iter().enumerate() {
        dq.extend_from_slice(g.dq.data());
        for (pos, &j) in routing.row(r).iter().enumerate() {
            let span = pos * nt * c..(pos + 1) * nt * c;
            for (dst, &src) in dk.row_mut(j).iter_mut().zip(&g.dkg.data()[span.clone()]) {
                *dst += src;
            }
            for (dst, &src) in dv.row_mut(j).iter_mut().zip(&g.dvg.data()[span]) {
                *dst += src;
            }
        }
        dwo.add_assign(&g.dwo)?;
    }
    let n = shape[0] * nt;
    let dq = Tensor::matrix(n, c, dq)?;
    let dk = dk.reshape(vec![n, c])?;
    let dv = dv.reshape(vec![n, c])?;

    let xt = p.tokens.transpose()?;
    let d_tokens = dq
        .matmul(&params.wq.transpose()?)?
        .add(&dk.matmul(&params.wk.transpose()?)?)?
        .add(&dv.matmul(&params.wv.transpose()?)?)?;
    let input = unpartition_regions(&d_tokens.reshape(shape)?, fm.height(), fm.width(), s)?;
    Ok(BraGrads {
        input,
        params: BraParams {
            wq: xt.matmul(&dq)?,
            wk: xt.matmul(&dk)?,
            wv: xt.matmul(&dv)?,
            wo: dwo,
        },
    })
}

/// Smallest gap between the k-th and (k+1)-th adjacency entries over all
/// rows; perturbations smaller than a fraction of this leave routing intact.
/// Infinite when `k == S^2`.
pub fn routing_margin<T: Scalar>(fm: &FeatureMap<T>, params: &BraParams<T>, cfg: &BraConfig<T>) -> Result<T> {
    let p = project(fm, params, cfg)?;
    let adjacency = region_adjacency(&region_reps(&p.q)?, &region_reps(&p.k)?)?;
    let n = cfg.num_regions();
    if cfg.top_k == n {
        return Ok(T::infinity());
    }
    let mut margin = T::infinity();
    for r in 0..n {
        let mut row = adjacency.row(r).to_vec();
        row.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        margin = margin.min(row[cfg.top_k - 1] - row[cfg.top_k]);
    }
    Ok(margin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMap::from_vec(h, w, c, data).unwrap()
    }

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn partition_counts_and_round_trip() {
        let fm = random_map(4, 4, 1, 1);
        let r = partition_regions(&fm, 2).unwrap();
        assert_eq!(r.shape(), &[4, 4, 1]);
        // region 1 is the top-right 2x2 block
        let d = fm.data();
        assert_eq!(r.row(1), &[d[2], d[3], d[6], d[7]]);
        assert_eq!(unpartition_regions(&r, 4, 4, 2).unwrap(), fm);

        let whole = partition_regions(&fm, 1).unwrap();
        assert_eq!(whole.shape(), &[1, 16, 1]);
        assert_eq!(whole.data(), fm.data());
    }

    #[test]
    fn partition_rejects_indivisible() {
        let fm = random_map(6, 4, 1, 2);
        assert!(matches!(partition_regions(&fm, 4), Err(Error::Shape(_))));
    }

    #[test]
    fn projections() {
        let tokens = m(&[&[1.0, 2.0], &[3.0, -1.0], &[0.5, 0.25]]);
        let id = BraParams::identity(2).unwrap();
        let (q, _, _) = project_qkv(&tokens, &id).unwrap();
        assert_eq!(q, tokens);
        let zero = Tensor::zeros(vec![3, 2]).unwrap();
        let (q, k, v) = project_qkv(&zero, &id).unwrap();
        assert!(q.data().iter().chain(k.data()).chain(v.data()).all(|&x| x == 0.0));

        let w = m(&[&[0.5, -1.0], &[2.0, 0.25]]);
        let p = BraParams::new(w.clone(), w.clone(), w.clone(), w).unwrap();
        let (q, _, _) = project_qkv(&tokens, &p).unwrap();
        // scalar expansion of tokens * w
        let expect = [
            1.0 * 0.5 + 2.0 * 2.0,
            1.0 * -1.0 + 2.0 * 0.25,
            3.0 * 0.5 + -1.0 * 2.0,
            3.0 * -1.0 + -1.0 * 0.25,
            0.5 * 0.5 + 0.25 * 2.0,
            0.5 * -1.0 + 0.25 * 0.25,
        ];
        assert_eq!(q.data(), &expect);
    }

    #[test]
    fn region_rep_examples() {
        let x = Tensor::new(vec![2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(region_reps(&x).unwrap().data(), x.data());
        let x = Tensor::new(vec![1, 2, 1], vec![1.0, 3.0]).unwrap();
        assert_eq!(region_reps(&x).unwrap().data(), &[2.0]);
        let x = Tensor::<f64>::new(vec![3, 4, 2], vec![0.7; 24]).unwrap();
        assert!(region_reps(&x).unwrap().data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn adjacency_examples() {
        let z = Tensor::<f64>::zeros(vec![2, 2]).unwrap();
        let i = Tensor::identity(2).unwrap();
        assert!(region_adjacency(&z, &i).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(region_adjacency(&i, &i).unwrap(), i);
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[0.5, -1.0], &[2.0, 1.0]]);
        assert_eq!(region_adjacency(&a, &b).unwrap().data(), &[-1.5, 4.0, -2.5, 10.0]);
    }

    #[test]
    fn topk_examples() {
        let a = m(&[&[3.0, 1.0], &[0.0, 2.0]]);
        assert_eq!(topk_routing(&a, 1).unwrap().rows(), &[vec![0], vec![1]]);
        let full = topk_routing(&a, 2).unwrap();
        for row in full.rows() {
            let mut s = row.clone();
            s.sort();
            assert_eq!(s, vec![0, 1]);
        }
        let t = m(&[&[5.0, 5.0, 1.0], &[1.0, 1.0, 1.0], &[0.0, 2.0, 2.0]]);
        assert_eq!(topk_routing(&t, 1).unwrap().rows(), &[vec![0], vec![0], vec![1]]);
        assert!(matches!(topk_routing(&a, 3), Err(Error::Config(_))));
        assert!(matches!(topk_routing(&a, 0), Err(Error::Config(_))));
    }

    #[test]
    fn gather_examples() {
        let k = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = k.scale(10.0);
        let all = RoutingIndex::new(vec![vec![0, 1], vec![0, 1]]).unwrap();
        let g = gather_kv(&k, &v, &all).unwrap();
        assert_eq!(g[0].0.data(), k.data());
        let own = RoutingIndex::new(vec![vec![0], vec![1]]).unwrap();
        let g = gather_kv(&k, &v, &own).unwrap();
        assert_eq!(g[1].0.data(), &[3.0, 4.0]);
        let swap = RoutingIndex::new(vec![vec![1], vec![0]]).unwrap();
        let g = gather_kv(&k, &v, &swap).unwrap();
        assert_eq!(g[0].0.data(), &[3.0, 4.0]);
        assert_eq!(g[1].1.data(), &[10.0, 20.0]);
    }

    #[test]
    fn routing_index_validation() {
        assert!(RoutingIndex::new(vec![vec![0, 0], vec![0, 1]]).is_err());
        assert!(RoutingIndex::new(vec![vec![2], vec![0]]).is_err());
        assert!(RoutingIndex::new(vec![vec![0], vec![0, 1]]).is_err());
    }

    #[test]
    fn single_key_attention_copies_value() {
        let cfg = BraConfig::new(1, 1, 2, 1).unwrap();
        let q = m(&[&[5.0, -3.0], &[0.1, 0.2], &[9.0, 9.0]]);
        let kg = m(&[&[1.0, 1.0]]);
        let vg = m(&[&[0.25, -0.5]]);
        let wo = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let out = token_attention(&q, &kg, &vg, &wo, &cfg).unwrap();
        let projected = vg.matmul(&wo).unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), projected.row(0));
        }
    }

    #[test]
    fn constant_values_give_constant_output() {
        let cfg = BraConfig::new(1, 1, 2, 2).unwrap();
        let q = m(&[&[5.0, -3.0], &[0.1, 0.2]]);
        let kg = m(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 2.0]]);
        let vg = m(&[&[0.5, -2.0], &[0.5, -2.0], &[0.5, -2.0]]);
        let id = Tensor::identity(2).unwrap();
        let out = token_attention(&q, &kg, &vg, &id, &cfg).unwrap();
        for i in 0..2 {
            assert!((out.at(i, 0) - 0.5).abs() < 1e-15);
            assert!((out.at(i, 1) + 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_token_single_head_case() {
        // Scores written out by hand for q, k in R^2 with scale 1/sqrt(2).
        let cfg = BraConfig::new(1, 1, 2, 1).unwrap();
        let q = m(&[&[0.3, -0.7], &[1.1, 0.4]]);
        let kg = m(&[&[0.2, 0.9], &[-0.5, 0.6]]);
        let vg = m(&[&[1.0, 2.0], &[-3.0, 0.5]]);
        let id = Tensor::identity(2).unwrap();
        let out = token_attention(&q, &kg, &vg, &id, &cfg).unwrap();
        let s = 1.0 / 2f64.sqrt();
        for i in 0..2 {
            let l0 = s * (q.at(i, 0) * 0.2 + q.at(i, 1) * 0.9);
            let l1 = s * (q.at(i, 0) * -0.5 + q.at(i, 1) * 0.6);
            let p0 = 1.0 / (1.0 + (l1 - l0).exp());
            let p1 = 1.0 - p0;
            assert!((out.at(i, 0) - (p0 * 1.0 + p1 * -3.0)).abs() < 1e-14);
            assert!((out.at(i, 1) - (p0 * 2.0 + p1 * 0.5)).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_preserves_shape_and_is_deterministic() {
        let fm = random_map(8, 8, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = BraParams::random(4, &mut rng).unwrap();
        let cfg = BraConfig::new(2, 2, 4, 2).unwrap();
        let (out, routing) = bra_forward(&fm, &params, &cfg).unwrap();
        assert_eq!(out.values().shape(), fm.values().shape());
        assert_eq!(routing.num_regions(), 4);
        let (again, routing2) = bra_forward(&fm, &params, &cfg).unwrap();
        assert_eq!(out, again);
        assert_eq!(routing, routing2);
        assert_eq!(bra_forward_routed(&fm, &params, &cfg, &routing).unwrap(), out);
    }

    #[test]
    fn forward_rejects_mismatched_inputs() {
        let fm = random_map(8, 8, 4, 3);
        let params = BraParams::identity(4).unwrap();
        let cfg = BraConfig::new(3, 1, 4, 1).unwrap();
        assert!(bra_forward(&fm, &params, &cfg).is_err());
        let cfg = BraConfig::new(2, 1, 2, 1).unwrap();
        assert!(bra_forward(&fm, &params, &cfg).is_err());
        assert!(BraConfig::<f64>::new(2, 5, 4, 1).is_err());
        assert!(BraConfig::<f64>::new(2, 1, 4, 3).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let fm = random_map(4, 4, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = BraParams::random(2, &mut rng).unwrap();
        let cfg = BraConfig::new(2, 2, 2, 1).unwrap();
        let zero = FeatureMap::zeros(4, 4, 2).unwrap();
        let g = bra_backward(&fm, &params, &cfg, None, &zero).unwrap();
        assert!(g.input.data().iter().all(|&x| x == 0.0));
        assert!(g.params.to_flat().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn text_round_trip() {
        let fm = random_map(2, 4, 3, 9);
        assert_eq!(FeatureMap::parse_text(&fm.to_text()).unwrap(), fm);
        assert!(FeatureMap::<f64>::parse_text("2 2 1\n1 2 3").is_err());
        assert!(FeatureMap::<f64>::parse_text("2 x 1").is_err());
    }

    #[test]
    fn params_flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = BraParams::<f64>::random(3, &mut rng).unwrap();
        assert_eq!(BraParams::from_flat(3, &p.to_flat()).unwrap(), p);
    }
}
