//! Four-direction 2-D selective scan and the VSS block.
//!
//! Grids are channels-last `[N, Hp, Wp, C]`; flattened sequences are
//! `[N, L, C]` with `L = Hp·Wp`.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{fan_in_uniform, LayerNorm, Linear, ParamId, ParamStore, Session};
use crate::ssm::{ScanOptions, S6};
use crate::tensor::{Scalar, Tensor};

/// Which four traversal orders the scan uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ScanOrder {
    /// Row-major, column-major, and both reversed.
    #[default]
    Cross,
    /// Row-major, column-major, diagonal, anti-diagonal.
    Diagonal,
}

impl ScanOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            ScanOrder::Cross => "cross",
            ScanOrder::Diagonal => "diagonal",
        }
    }
}

impl std::str::FromStr for ScanOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross" => Ok(ScanOrder::Cross),
            "diagonal" => Ok(ScanOrder::Diagonal),
            _ => Err(Error::Config(format!("unknown scan order {s:?} (expected cross or diagonal)"))),
        }
    }
}

/// For each direction, `order[k]` is the row-major grid index of the `k`-th
/// token in that direction's sequence.
pub fn scan_orders(hp: usize, wp: usize, order: ScanOrder) -> [Vec<usize>; 4] {
    let row: Vec<usize> = (0..hp * wp).collect();
    let col: Vec<usize> = (0..hp * wp).map(|k| (k % hp) * wp + k / hp).collect();
    match order {
        ScanOrder::Cross => {
            let rrow = row.iter().rev().copied().collect();
            let rcol = col.iter().rev().copied().collect();
            [row, col, rrow, rcol]
        }
        ScanOrder::Diagonal => {
            let sorted = |key: &dyn Fn(usize, usize) -> (usize, usize)| {
                let mut idx = row.clone();
                idx.sort_by_key(|&p| key(p / wp, p % wp));
                idx
            };
            let diag = sorted(&|i, j| (i + j, i));
            let anti = sorted(&|i, j| (i + (wp - 1 - j), i));
            [row.clone(), col, diag, anti]
        }
    }
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

fn grid_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, h, w, c] => Ok((n, h, w, c)),
        _ => Err(Error::shape(format!("patch grid must be [N, Hp, Wp, C], got {shape:?}"))),
    }
}

fn permute_tokens<T: Scalar>(src: &[T], n: usize, l: usize, c: usize, order: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for b in 0..n {
        for &p in order {
            out.extend_from_slice(&src[(b * l + p) * c..][..c]);
        }
    }
    out
}

/// Flattens a grid `[N, Hp, Wp, C]` into four `[N, L, C]` sequences.
pub fn cross_scan<T: Scalar>(grid: &Tensor<T>, order: ScanOrder) -> Result<[Tensor<T>; 4]> {
    let (n, h, w, c) = grid_dims(grid.shape())?;
    let orders = scan_orders(h, w, order);
    let mut out = Vec::with_capacity(4);
    for o in &orders {
        out.push(Tensor::from_vec(vec![n, h * w, c], permute_tokens(grid.data(), n, h * w, c, o))?);
    }
    Ok(out.try_into().expect("four directions"))
}

/// Unflattens each direction back to grid order and averages them.
pub fn cross_merge<T: Scalar>(seqs: &[Tensor<T>; 4], hp: usize, wp: usize, order: ScanOrder) -> Result<Tensor<T>> {
    let s0 = seqs[0].shape().to_vec();
    if s0.len() != 3 || s0[1] != hp * wp || seqs.iter().any(|s| s.shape() != s0.as_slice()) {
        return Err(Error::shape(format!(
            "cross_merge needs four [N, {}, C] sequences, got {:?}",
            hp * wp,
            seqs.iter().map(|s| s.shape().to_vec()).collect::<Vec<_>>()
        )));
    }
    let (n, l, c) = (s0[0], s0[1], s0[2]);
    let mut acc = vec![T::zero(); n * l * c];
    for (seq, o) in seqs.iter().zip(scan_orders(hp, wp, order)) {
        let back = permute_tokens(seq.data(), n, l, c, &inverse(&o));
        acc.iter_mut().zip(back).for_each(|(a, v)| *a += v);
    }
    let quarter = T::lit(0.25);
    acc.iter_mut().for_each(|v| *v *= quarter);
    Tensor::from_vec(vec![n, hp, wp, c], acc)
}

/// Graph version of [`cross_scan`].
pub fn cross_scan_var<T: Scalar>(s: &mut Session<T>, grid: Var, order: ScanOrder) -> Result<[Var; 4]> {
    let (n, h, w, c) = grid_dims(s.g.shape(grid))?;
    let flat = s.g.reshape(grid, &[n, h * w, c])?;
    let orders = scan_orders(h, w, order);
    Ok([
        s.g.index_select(flat, 1, &orders[0])?,
        s.g.index_select(flat, 1, &orders[1])?,
        s.g.index_select(flat, 1, &orders[2])?,
        s.g.index_select(flat, 1, &orders[3])?,
    ])
}

/// Graph version of [`cross_merge`].
pub fn cross_merge_var<T: Scalar>(s: &mut Session<T>, seqs: [Var; 4], hp: usize, wp: usize, order: ScanOrder) -> Result<Var> {
    let orders = scan_orders(hp, wp, order);
    let mut total: Option<Var> = None;
    for (seq, o) in seqs.into_iter().zip(orders) {
        let back = s.g.index_select(seq, 1, &inverse(&o))?;
        total = Some(match total {
            Some(t) => s.g.add(t, back)?,
            None => back,
        });
    }
    let mean = s.g.scale(total.expect("four directions"), 0.25)?;
    let sh = s.g.shape(mean).to_vec();
    s.g.reshape(mean, &[sh[0], hp, wp, sh[2]])
}

/// Hyperparameters of one VSS block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VssConfig {
    pub dim: usize,
    pub state: usize,
    pub expand: usize,
    pub ffn_ratio: usize,
    pub order: ScanOrder,
    pub scan: ScanOptions,
}

impl VssConfig {
    pub fn new(dim: usize, state: usize) -> Self {
        VssConfig { dim, state, expand: 2, ffn_ratio: 4, order: ScanOrder::Cross, scan: ScanOptions::default() }
    }
}

/// `y = x + SS2D(LN(x))`, `out = y + FFN(LN(y))`.
#[derive(Clone, Debug)]
pub struct VssBlock {
    pub cfg: VssConfig,
    pub norm1: LayerNorm,
    pub in_proj: Linear,
    pub dw_weight: ParamId,
    pub dw_bias: ParamId,
    pub scans: [S6; 4],
    pub out_norm: LayerNorm,
    pub out_proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl VssBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: VssConfig, rng: &mut impl Rng) -> Self {
        let (c, e) = (cfg.dim, cfg.dim * cfg.expand);
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), c);
        let in_proj = Linear::new(store, &format!("{name}.in_proj"), c, 2 * e, false, rng);
        let dw_weight = store.add(format!("{name}.dwconv.weight"), fan_in_uniform(&[e, 3, 3], 9, rng), true);
        let dw_bias = store.add(format!("{name}.dwconv.bias"), Tensor::zeros([e]), false);
        let scans = [0, 1, 2, 3].map(|k| S6::new(store, &format!("{name}.s6_{k}"), e, cfg.state, false, rng));
        let out_norm = LayerNorm::new(store, &format!("{name}.out_norm"), e);
        let out_proj = Linear::new(store, &format!("{name}.out_proj"), e, c, false, rng);
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), c);
        let fc1 = Linear::new(store, &format!("{name}.fc1"), c, c * cfg.ffn_ratio, true, rng);
        let fc2 = Linear::new(store, &format!("{name}.fc2"), c * cfg.ffn_ratio, c, true, rng);
        VssBlock { cfg, norm1, in_proj, dw_weight, dw_bias, scans, out_norm, out_proj, norm2, fc1, fc2 }
    }

    /// The SS2D branch (without the residual) on a normalised grid.
    pub fn ss2d<T: Scalar>(&self, s: &mut Session<T>, u: Var) -> Result<Var> {
        let (n, h, w, _) = grid_dims(s.g.shape(u))?;
        let e = self.cfg.dim * self.cfg.expand;
        let xz = self.in_proj.forward(s, u)?;
        let xin = s.g.narrow(xz, 3, 0, e)?;
        let z = s.g.narrow(xz, 3, e, e)?;
        let dw = s.p(self.dw_weight);
        let db = s.p(self.dw_bias);
        let xc = s.g.dwconv_nhwc(xin, dw, db)?;
        let xc = s.g.silu(xc)?;
        let seqs = cross_scan_var(s, xc, self.cfg.order)?;
        let mut outs = Vec::with_capacity(4);
        for (seq, s6) in seqs.into_iter().zip(&self.scans) {
            outs.push(s6.forward(s, seq, self.cfg.scan)?);
        }
        let merged = cross_merge_var(s, outs.try_into().expect("four"), h, w, self.cfg.order)?;
        debug_assert_eq!(s.g.shape(merged), [n, h, w, e]);
        let y = self.out_norm.forward(s, merged)?;
        let gate = s.g.silu(z)?;
        let y = s.g.mul(y, gate)?;
        self.out_proj.forward(s, y)
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let sx = s.g.shape(x).to_vec();
        if sx.len() != 4 || sx[3] != self.cfg.dim {
            return Err(Error::shape(format!("VSS block expects [N, Hp, Wp, {}], got {sx:?}", self.cfg.dim)));
        }
        let u = self.norm1.forward(s, x)?;
        let branch = self.ss2d(s, u)?;
        let y = s.g.add(x, branch)?;
        let v = self.norm2.forward(s, y)?;
        let f = self.fc1.forward(s, v)?;
        let f = s.g.gelu(f)?;
        let f = self.fc2.forward(s, f)?;
        s.g.add(y, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_orders() {
        // a b / c d
        let [d0, d1, d2, d3] = scan_orders(2, 2, ScanOrder::Cross);
        assert_eq!(d0, [0, 1, 2, 3]);
        assert_eq!(d1, [0, 2, 1, 3]);
        assert_eq!(d2, [3, 2, 1, 0]);
        assert_eq!(d3, [3, 1, 2, 0]);
    }

    #[test]
    fn single_row_collapses_directions() {
        let [d0, d1, d2, d3] = scan_orders(1, 5, ScanOrder::Cross);
        assert_eq!(d0, d1);
        assert_eq!(d2, d3);
    }

    #[test]
    fn diagonal_orders_are_permutations() {
        let orders = scan_orders(3, 4, ScanOrder::Diagonal);
        assert_eq!(orders[2][..4], [0, 1, 4, 2]);
        assert_eq!(orders[3][..3], [3, 2, 7]);
        for o in orders {
            let mut s = o.clone();
            s.sort_unstable();
            assert_eq!(s, (0..12).collect::<Vec<_>>());
        }
    }

    #[test]
    fn merge_of_one_direction_is_a_quarter() {
        let g = Tensor::<f64>::from_vec([1, 2, 3, 1], (0..6).map(f64::from).collect()).unwrap();
        let seqs = cross_scan(&g, ScanOrder::Cross).unwrap();
        let z = Tensor::zeros([1, 6, 1]);
        let out = cross_merge(&[z.clone(), seqs[1].clone(), z.clone(), z], 2, 3, ScanOrder::Cross).unwrap();
        assert_eq!(out.data(), g.map(|v| v / 4.0).data());
    }
}
