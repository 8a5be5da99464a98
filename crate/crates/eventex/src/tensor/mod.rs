//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every tensor created during one forward pass and records
//! the producing op per node. Node indices are topological by construction
//! (an op's inputs always precede its output), so [`Tape::backward`] walks
//! the nodes in reverse, accumulating gradients with `+=` — a node consumed
//! by several ops receives the sum of all contributions.
//!
//! The tape is define-by-run and rebuilt per training step. One tape is
//! single-threaded; independent tapes may run on separate threads.

pub mod gradcheck;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// A dense rank-1..3 tensor, row-major.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Plain matrix value for data that lives off the tape (logits snapshots,
/// embedding fixtures).
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Slot layout for the per-position classifier input: hidden vectors of the
/// trigger span (fixed `trigger_slots`, zero-padded, truncated to the first
/// `trigger_slots` tokens) followed by the hidden vectors of the context
/// window around the position (zero-padded at region boundaries).
#[derive(Debug, Clone)]
pub struct WindowSpec {
    /// Trigger span in emitted coordinates, inclusive.
    pub trigger: (usize, usize),
    /// Number of fixed trigger slots.
    pub trigger_slots: usize,
    /// Context-window width (odd).
    pub window: usize,
    /// Rows of the emitted sequence that belong to the original sentence;
    /// window lookups never cross this region.
    pub region: (usize, usize),
}

enum Op {
    Leaf,
    /// out = x · w + b, x: [n, in], w: [in, out], b: [out]
    Affine {
        x: TensorId,
        w: TensorId,
        b: TensorId,
    },
    /// Same-length 1-D convolution over [T, in] with weights [k, in, out].
    Conv1d {
        x: TensorId,
        w: TensorId,
        b: TensorId,
        dilation: usize,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        x: TensorId,
        factor: f64,
    },
    Sigmoid {
        x: TensorId,
    },
    Relu {
        x: TensorId,
    },
    /// Column-wise concatenation of matrices with equal row counts.
    ConcatCols {
        parts: Vec<TensorId>,
    },
    /// out[r] = table[ids[r]]; duplicate ids accumulate in backward.
    Gather {
        table: TensorId,
        ids: Vec<usize>,
    },
    /// Inverted dropout: out = x * mask / (1 - p); mask recorded.
    Dropout {
        x: TensorId,
        mask: Vec<f64>,
        keep_scale: f64,
    },
    Sum {
        x: TensorId,
    },
    /// Combined softmax + cross-entropy over rows with Some(target);
    /// None rows contribute nothing, including to the gradient.
    SoftmaxXent {
        logits: TensorId,
        targets: Vec<Option<usize>>,
        mean: bool,
        probs: Vec<f64>,
    },
    /// Classifier-input assembly; see [`WindowSpec`].
    GatherWindows {
        hidden: TensorId,
        spec: WindowSpec,
    },
}

/// Define-by-run computation tape.
pub struct Tape {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
    rng: ChaCha8Rng,
    train: bool,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape {
        op,
        detail,
    }
}

impl Tape {
    /// A tape for inference: dropout is the identity.
    pub fn new() -> Self {
        Tape::with_seed(0, false)
    }

    /// A tape for training; `seed` drives dropout masks.
    pub fn with_seed(seed: u64, train: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            train,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    fn push(&mut self, t: Tensor, op: Op) -> TensorId {
        self.nodes.push(t);
        self.ops.push(op);
        TensorId(self.nodes.len() - 1)
    }

    pub fn leaf(
        &mut self,
        values: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
    ) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > 3 {
            return Err(shape_err("leaf", format!("rank {} not in 1..=3", shape.len())));
        }
        if numel != values.len() {
            return Err(shape_err(
                "leaf",
                format!("shape {:?} wants {} values, got {}", shape, numel, values.len()),
            ));
        }
        Ok(self.push(
            Tensor {
                shape,
                values,
                requires_grad,
                grad: None,
            },
            Op::Leaf,
        ))
    }

    pub fn constant(&mut self, values: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(values, shape, false)
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn dims2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(shape_err(op, format!("expected rank-2 input, got {:?}", s)));
        }
        Ok((s[0], s[1]))
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn affine(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let (n, in_dim) = self.dims2(x, "affine")?;
        let (w_in, out_dim) = self.dims2(w, "affine")?;
        if w_in != in_dim {
            return Err(shape_err(
                "affine",
                format!("x has {} columns but w has {} rows", in_dim, w_in),
            ));
        }
        if self.shape(b) != [out_dim] {
            return Err(shape_err(
                "affine",
                format!("bias shape {:?} != [{}]", self.shape(b), out_dim),
            ));
        }
        let mut out = vec![0.0; n * out_dim];
        {
            let xv = &self.nodes[x.0].values;
            let wv = &self.nodes[w.0].values;
            let bv = &self.nodes[b.0].values;
            for r in 0..n {
                let o = &mut out[r * out_dim..(r + 1) * out_dim];
                o.copy_from_slice(bv);
                let xr = &xv[r * in_dim..(r + 1) * in_dim];
                for (i, &xi) in xr.iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    let wr = &wv[i * out_dim..(i + 1) * out_dim];
                    for (oo, &ww) in o.iter_mut().zip(wr) {
                        *oo += xi * ww;
                    }
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![n, out_dim],
                values: out,
                requires_grad: false,
                grad: None,
            },
            Op::Affine { x, w, b },
        ))
    }

    /// Same-length dilated conv over `[T, in]`; weights `[k, in, out]`,
    /// zero padding of `(k-1)*d/2` per side.
    pub fn conv1d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        dilation: usize,
    ) -> Result<TensorId> {
        let (t_len, in_dim) = self.dims2(x, "conv1d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 {
            return Err(shape_err("conv1d", format!("weights must be [k,in,out], got {:?}", ws)));
        }
        let (k, w_in, out_dim) = (ws[0], ws[1], ws[2]);
        if k % 2 == 0 || k == 0 {
            return Err(shape_err("conv1d", format!("window {} must be odd and positive", k)));
        }
        if dilation == 0 {
            return Err(shape_err("conv1d", "dilation must be positive".into()));
        }
        if w_in != in_dim {
            return Err(shape_err(
                "conv1d",
                format!("x has {} channels but weights expect {}", in_dim, w_in),
            ));
        }
        if self.shape(b) != [out_dim] {
            return Err(shape_err(
                "conv1d",
                format!("bias shape {:?} != [{}]", self.shape(b), out_dim),
            ));
        }
        let center = (k - 1) / 2;
        let mut out = vec![0.0; t_len * out_dim];
        {
            let xv = &self.nodes[x.0].values;
            let wv = &self.nodes[w.0].values;
            let bv = &self.nodes[b.0].values;
            for t in 0..t_len {
                out[t * out_dim..(t + 1) * out_dim].copy_from_slice(bv);
            }
            for j in 0..k {
                let off = (j as isize - center as isize) * dilation as isize;
                let t_lo = (-off).max(0) as usize;
                let t_hi = ((t_len as isize - off).min(t_len as isize)).max(0) as usize;
                let wj = &wv[j * in_dim * out_dim..(j + 1) * in_dim * out_dim];
                for t in t_lo..t_hi {
                    let src = (t as isize + off) as usize;
                    let xr = &xv[src * in_dim..(src + 1) * in_dim];
                    let o = &mut out[t * out_dim..(t + 1) * out_dim];
                    for (i, &xi) in xr.iter().enumerate() {
                        if xi == 0.0 {
                            continue;
                        }
                        let wr = &wj[i * out_dim..(i + 1) * out_dim];
                        for (oo, &ww) in o.iter_mut().zip(wr) {
                            *oo += xi * ww;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![t_len, out_dim],
                values: out,
                requires_grad: false,
                grad: None,
            },
            Op::Conv1d { x, w, b, dilation },
        ))
    }

    fn elementwise_pair(
        &mut self,
        a: TensorId,
        b: TensorId,
        op_name: &'static str,
    ) -> Result<(Vec<usize>, usize)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        if sa != sb {
            return Err(shape_err(
                op_name,
                format!("operand shapes differ: {:?} vs {:?}", sa, sb),
            ));
        }
        let n = self.nodes[a.0].numel();
        Ok((sa, n))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (shape, n) = self.elementwise_pair(a, b, "add")?;
        let mut out = vec![0.0; n];
        for i in 0..n {
            out[i] = self.nodes[a.0].values[i] + self.nodes[b.0].values[i];
        }
        Ok(self.push(
            Tensor {
                shape,
                values: out,
                requires_grad: false,
                grad: None,
            },
            Op::Add { a, b },
        ))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (shape, n) = self.elementwise_pair(a, b, "mul")?;
        let mut out = vec![0.0; n];
        for i in 0..n {
            out[i] = self.nodes[a.0].values[i] * self.nodes[b.0].values[i];
        }
        Ok(self.push(
            Tensor {
                shape,
                values: out,
                requires_grad: false,
                grad: None,
            },
            Op::Mul { a, b },
        ))
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let out: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v * factor).collect();
        Ok(self.push(
            Tensor {
                shape,
                values: out,
                requires_grad: false,
                grad: None,
            },
            Op::Scale { x, factor },
        ))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let out: Vec<f64> = self.nodes[x.0]
            .values
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        Ok(self.push(
            Tensor {
                shape,
                values: out,
                requires_grad: false,
                grad: None,
            },
            Op::Sigmoid { x },
        ))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let out: Vec<f64> = self.nodes[x.0].values.iter().map(|&v| v.max(0.0)).collect();
        Ok(self.push(
            Tensor {
                shape,
                values: out,
                requires_grad: false,
                grad: None,
            },
            Op::Relu { x },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no parts given".into()));
        }
        let (rows, _) = self.dims2(parts[0], "concat")?;
        let mut total_cols = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat")?;
            if r != rows {
                return Err(shape_err(
                    "concat",
                    format!("row counts differ: {} vs {}", rows, r),
                ));
            }
            total_cols += c;
        }
        let mut out = vec![0.0; rows * total_cols];
        let mut col0 = 0;
        for &p in parts {
            let c = self.shape(p)[1];
            let pv = &self.nodes[p.0].values;
            for r in 0..rows {
                out[r * total_cols + col0..r * total_cols + col0 + c]
                    .copy_from_slice(&pv[r * c..(r + 1) * c]);
            }
            col0 += c;
        }
        Ok(self.push(
            Tensor {
                shape: vec![rows, total_cols],
                values: out,
                requires_grad: false,
                grad: None,
            },
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Row lookup into `[vocab, dim]`. Out-of-range ids are an error,
    /// never a silent clamp.
    pub fn gather(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (vocab, dim) = self.dims2(table, "gather")?;
        for &id in ids {
            if id >= vocab {
                return Err(shape_err(
                    "gather",
                    format!("id {} out of range for vocab {}", id, vocab),
                ));
            }
        }
        let mut out = vec![0.0; ids.len() * dim];
        let tv = &self.nodes[table.0].values;
        for (r, &id) in ids.iter().enumerate() {
            out[r * dim..(r + 1) * dim].copy_from_slice(&tv[id * dim..(id + 1) * dim]);
        }
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), dim],
                values: out,
                requires_grad: false,
                grad: None,
            },
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Inverted dropout: keeps units with probability `1-p` and scales them
    /// by `1/(1-p)` at train time; identity (no node) at eval time.
    pub fn dropout(&mut self, x: TensorId, p: f64) -> Result<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {} not in [0,1)", p)));
        }
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        let n = self.nodes[x.0].numel();
        let shape = self.shape(x).to_vec();
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { 1.0 })
            .collect();
        let out: Vec<f64> = self.nodes[x.0]
            .values
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m * keep_scale)
            .collect();
        Ok(self.push(
            Tensor {
                shape,
                values: out,
                requires_grad: false,
                grad: None,
            },
            Op::Dropout { x, mask, keep_scale },
        ))
    }

    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let total: f64 = self.nodes[x.0].values.iter().sum();
        Ok(self.push(
            Tensor {
                shape: vec![1],
                values: vec![total],
                requires_grad: false,
                grad: None,
            },
            Op::Sum { x },
        ))
    }

    /// Softmax cross-entropy over `[n, C]` logits against per-row class
    /// indices; `None` rows are excluded from both loss and gradient.
    /// Summed over rows, or averaged when `mean` is set.
    pub fn softmax_xent(
        &mut self,
        logits: TensorId,
        targets: &[Option<usize>],
        mean: bool,
    ) -> Result<TensorId> {
        let (n, classes) = self.dims2(logits, "softmax_xent")?;
        if targets.len() != n {
            return Err(shape_err(
                "softmax_xent",
                format!("{} target rows for {} logit rows", targets.len(), n),
            ));
        }
        let mut probs = vec![0.0; n * classes];
        let mut total = 0.0;
        let mut active = 0usize;
        {
            let lv = &self.nodes[logits.0].values;
            for (r, tgt) in targets.iter().enumerate() {
                let Some(t) = tgt else { continue };
                if *t >= classes {
                    return Err(shape_err(
                        "softmax_xent",
                        format!("target class {} out of range for {} classes", t, classes),
                    ));
                }
                let row = &lv[r * classes..(r + 1) * classes];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for (c, &l) in row.iter().enumerate() {
                    let e = (l - max).exp();
                    probs[r * classes + c] = e;
                    denom += e;
                }
                for c in 0..classes {
                    probs[r * classes + c] /= denom;
                }
                total += denom.ln() - (row[*t] - max);
                active += 1;
            }
        }
        if mean && active > 0 {
            total /= active as f64;
        }
        Ok(self.push(
            Tensor {
                shape: vec![1],
                values: vec![total],
                requires_grad: false,
                grad: None,
            },
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                mean,
                probs,
            },
        ))
    }

    /// Batched classifier-input assembly: one output row per emitted
    /// position, columns = (trigger_slots + window) * hidden_dim.
    pub fn gather_windows(&mut self, hidden: TensorId, spec: WindowSpec) -> Result<TensorId> {
        let (t_len, dim) = self.dims2(hidden, "gather_windows")?;
        let (trig_lo, trig_hi) = spec.trigger;
        if trig_lo > trig_hi || trig_hi >= t_len {
            return Err(shape_err(
                "gather_windows",
                format!("trigger span ({},{}) invalid for length {}", trig_lo, trig_hi, t_len),
            ));
        }
        if spec.window % 2 == 0 || spec.window == 0 {
            return Err(shape_err(
                "gather_windows",
                format!("window {} must be odd and positive", spec.window),
            ));
        }
        let (reg_lo, reg_hi) = spec.region;
        if reg_lo > reg_hi || reg_hi > t_len {
            return Err(shape_err(
                "gather_windows",
                format!("region ({},{}) invalid for length {}", reg_lo, reg_hi, t_len),
            ));
        }
        let slots = spec.trigger_slots + spec.window;
        let out_cols = slots * dim;
        let half = (spec.window - 1) / 2;
        let mut out = vec![0.0; t_len * out_cols];
        {
            let hv = &self.nodes[hidden.0].values;
            for t in 0..t_len {
                let base = t * out_cols;
                // Trigger slots are shared by every row; truncation keeps the
                // first `trigger_slots` trigger tokens.
                for s in 0..spec.trigger_slots {
                    let src = trig_lo + s;
                    if src <= trig_hi {
                        out[base + s * dim..base + (s + 1) * dim]
                            .copy_from_slice(&hv[src * dim..(src + 1) * dim]);
                    }
                }
                // Window slots exist only for rows inside the region and
                // never read outside it.
                if t >= reg_lo && t < reg_hi {
                    for wslot in 0..spec.window {
                        let pos = t as isize + wslot as isize - half as isize;
                        if pos < reg_lo as isize || pos >= reg_hi as isize {
                            continue;
                        }
                        let src = pos as usize;
                        let dst = base + (spec.trigger_slots + wslot) * dim;
                        out[dst..dst + dim].copy_from_slice(&hv[src * dim..(src + 1) * dim]);
                    }
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![t_len, out_cols],
                values: out,
                requires_grad: false,
                grad: None,
            },
            Op::GatherWindows { hidden, spec },
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Every `requires_grad` leaf
    /// ends with a fully populated gradient (zeros where no path exists).
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n_nodes = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n_nodes];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..n_nodes).rev() {
            let Some(g_out) = grads[idx].take() else {
                continue;
            };
            match &self.ops[idx] {
                Op::Leaf => {
                    grads[idx] = Some(g_out);
                    continue;
                }
                Op::Affine { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let (n, in_dim) = (self.shape(x)[0], self.shape(x)[1]);
                    let out_dim = self.shape(w)[1];
                    let xv = &self.nodes[x.0].values;
                    let wv = &self.nodes[w.0].values;
                    let mut gx = vec![0.0; n * in_dim];
                    let mut gw = vec![0.0; in_dim * out_dim];
                    let mut gb = vec![0.0; out_dim];
                    for r in 0..n {
                        let go = &g_out[r * out_dim..(r + 1) * out_dim];
                        let xr = &xv[r * in_dim..(r + 1) * in_dim];
                        for i in 0..in_dim {
                            let wr = &wv[i * out_dim..(i + 1) * out_dim];
                            let mut acc = 0.0;
                            for (gg, ww) in go.iter().zip(wr) {
                                acc += gg * ww;
                            }
                            gx[r * in_dim + i] = acc;
                            let xi = xr[i];
                            if xi != 0.0 {
                                let gwr = &mut gw[i * out_dim..(i + 1) * out_dim];
                                for (gwi, gg) in gwr.iter_mut().zip(go) {
                                    *gwi += xi * gg;
                                }
                            }
                        }
                        for (gbi, gg) in gb.iter_mut().zip(go) {
                            *gbi += gg;
                        }
                    }
                    accumulate(&mut grads, x.0, &gx);
                    accumulate(&mut grads, w.0, &gw);
                    accumulate(&mut grads, b.0, &gb);
                }
                Op::Conv1d { x, w, b, dilation } => {
                    let (x, w, b, dilation) = (*x, *w, *b, *dilation);
                    let (t_len, in_dim) = (self.shape(x)[0], self.shape(x)[1]);
                    let ws = self.shape(w);
                    let (k, out_dim) = (ws[0], ws[2]);
                    let center = (k - 1) / 2;
                    let xv = &self.nodes[x.0].values;
                    let wv = &self.nodes[w.0].values;
                    let mut gx = vec![0.0; t_len * in_dim];
                    let mut gw = vec![0.0; k * in_dim * out_dim];
                    let mut gb = vec![0.0; out_dim];
                    for t in 0..t_len {
                        let go = &g_out[t * out_dim..(t + 1) * out_dim];
                        for (gbi, gg) in gb.iter_mut().zip(go) {
                            *gbi += gg;
                        }
                    }
                    for j in 0..k {
                        let off = (j as isize - center as isize) * dilation as isize;
                        let t_lo = (-off).max(0) as usize;
                        let t_hi = ((t_len as isize - off).min(t_len as isize)).max(0) as usize;
                        let wj = &wv[j * in_dim * out_dim..(j + 1) * in_dim * out_dim];
                        let gwj_base = j * in_dim * out_dim;
                        for t in t_lo..t_hi {
                            let src = (t as isize + off) as usize;
                            let go = &g_out[t * out_dim..(t + 1) * out_dim];
                            let xr = &xv[src * in_dim..(src + 1) * in_dim];
                            for i in 0..in_dim {
                                let wr = &wj[i * out_dim..(i + 1) * out_dim];
                                let mut acc = 0.0;
                                for (gg, ww) in go.iter().zip(wr) {
                                    acc += gg * ww;
                                }
                                gx[src * in_dim + i] += acc;
                                let xi = xr[i];
                                if xi != 0.0 {
                                    let gwr = &mut gw
                                        [gwj_base + i * out_dim..gwj_base + (i + 1) * out_dim];
                                    for (gwi, gg) in gwr.iter_mut().zip(go) {
                                        *gwi += xi * gg;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, x.0, &gx);
                    accumulate(&mut grads, w.0, &gw);
                    accumulate(&mut grads, b.0, &gb);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads, a.0, &g_out);
                    accumulate(&mut grads, b.0, &g_out);
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let ga: Vec<f64> = g_out
                        .iter()
                        .zip(&self.nodes[b.0].values)
                        .map(|(g, v)| g * v)
                        .collect();
                    let gb: Vec<f64> = g_out
                        .iter()
                        .zip(&self.nodes[a.0].values)
                        .map(|(g, v)| g * v)
                        .collect();
                    accumulate(&mut grads, a.0, &ga);
                    accumulate(&mut grads, b.0, &gb);
                }
                Op::Scale { x, factor } => {
                    let (x, factor) = (*x, *factor);
                    let gx: Vec<f64> = g_out.iter().map(|g| g * factor).collect();
                    accumulate(&mut grads, x.0, &gx);
                }
                Op::Sigmoid { x } => {
                    let x = *x;
                    let gx: Vec<f64> = g_out
                        .iter()
                        .zip(&self.nodes[idx].values)
                        .map(|(g, &y)| g * y * (1.0 - y))
                        .collect();
                    accumulate(&mut grads, x.0, &gx);
                }
                Op::Relu { x } => {
                    let x = *x;
                    let gx: Vec<f64> = g_out
                        .iter()
                        .zip(&self.nodes[x.0].values)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, x.0, &gx);
                }
                Op::ConcatCols { parts } => {
                    let parts = parts.clone();
                    let rows = self.shape(parts[0])[0];
                    let total_cols = self.shape(TensorId(idx))[1];
                    let mut col0 = 0;
                    for p in parts {
                        let c = self.shape(p)[1];
                        let mut gp = vec![0.0; rows * c];
                        for r in 0..rows {
                            gp[r * c..(r + 1) * c].copy_from_slice(
                                &g_out[r * total_cols + col0..r * total_cols + col0 + c],
                            );
                        }
                        accumulate(&mut grads, p.0, &gp);
                        col0 += c;
                    }
                }
                Op::Gather { table, ids } => {
                    let table = *table;
                    let ids = ids.clone();
                    let (vocab, dim) = (self.shape(table)[0], self.shape(table)[1]);
                    let mut gt = vec![0.0; vocab * dim];
                    for (r, id) in ids.iter().enumerate() {
                        let gr = &g_out[r * dim..(r + 1) * dim];
                        let dst = &mut gt[id * dim..(id + 1) * dim];
                        for (d, g) in dst.iter_mut().zip(gr) {
                            *d += g;
                        }
                    }
                    accumulate(&mut grads, table.0, &gt);
                }
                Op::Dropout { x, mask, keep_scale } => {
                    let x = *x;
                    let keep_scale = *keep_scale;
                    let gx: Vec<f64> = g_out
                        .iter()
                        .zip(mask)
                        .map(|(g, m)| g * m * keep_scale)
                        .collect();
                    accumulate(&mut grads, x.0, &gx);
                }
                Op::Sum { x } => {
                    let x = *x;
                    let gx = vec![g_out[0]; self.nodes[x.0].numel()];
                    accumulate(&mut grads, x.0, &gx);
                }
                Op::SoftmaxXent {
                    logits,
                    targets,
                    mean,
                    probs,
                } => {
                    let logits = *logits;
                    let classes = self.shape(logits)[1];
                    let active = targets.iter().flatten().count().max(1);
                    let scale = if *mean {
                        g_out[0] / active as f64
                    } else {
                        g_out[0]
                    };
                    let mut gl = vec![0.0; self.nodes[logits.0].numel()];
                    for (r, tgt) in targets.iter().enumerate() {
                        let Some(t) = tgt else { continue };
                        for c in 0..classes {
                            let indicator = if c == *t { 1.0 } else { 0.0 };
                            gl[r * classes + c] = scale * (probs[r * classes + c] - indicator);
                        }
                    }
                    accumulate(&mut grads, logits.0, &gl);
                }
                Op::GatherWindows { hidden, spec } => {
                    let hidden = *hidden;
                    let spec = spec.clone();
                    let (t_len, dim) = (self.shape(hidden)[0], self.shape(hidden)[1]);
                    let slots = spec.trigger_slots + spec.window;
                    let out_cols = slots * dim;
                    let half = (spec.window - 1) / 2;
                    let (trig_lo, trig_hi) = spec.trigger;
                    let (reg_lo, reg_hi) = spec.region;
                    let mut gh = vec![0.0; t_len * dim];
                    for t in 0..t_len {
                        let base = t * out_cols;
                        for s in 0..spec.trigger_slots {
                            let src = trig_lo + s;
                            if src <= trig_hi {
                                let g = &g_out[base + s * dim..base + (s + 1) * dim];
                                let dst = &mut gh[src * dim..(src + 1) * dim];
                                for (d, gg) in dst.iter_mut().zip(g) {
                                    *d += gg;
                                }
                            }
                        }
                        if t >= reg_lo && t < reg_hi {
                            for wslot in 0..spec.window {
                                let pos = t as isize + wslot as isize - half as isize;
                                if pos < reg_lo as isize || pos >= reg_hi as isize {
                                    continue;
                                }
                                let src = pos as usize;
                                let gsrc = base + (spec.trigger_slots + wslot) * dim;
                                let g = &g_out[gsrc..gsrc + dim];
                                let dst = &mut gh[src * dim..(src + 1) * dim];
                                for (d, gg) in dst.iter_mut().zip(g) {
                                    *d += gg;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, hidden.0, &gh);
                }
            }
        }

        // Publish gradients; requires_grad leaves are always populated.
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if let Some(g) = grads[i].take() {
                node.grad = Some(g);
            } else if node.requires_grad && matches!(self.ops[i], Op::Leaf) {
                node.grad = Some(vec![0.0; node.numel()]);
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, contribution: &[f64]) {
    match &mut grads[idx] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution.to_vec()),
    }
}
