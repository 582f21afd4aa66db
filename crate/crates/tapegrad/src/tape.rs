use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::tensor::{dims2, dims3, NodeRef, Tensor};
use crate::{Error, Result};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

type Parent = Option<usize>;

enum Op {
    Leaf,
    Add {
        a: Parent,
        b: Parent,
        a_len: usize,
        b_len: usize,
    },
    Sub {
        a: Parent,
        b: Parent,
        a_len: usize,
        b_len: usize,
    },
    Mul {
        a: Parent,
        b: Parent,
        a_vals: Arc<Vec<f64>>,
        b_vals: Arc<Vec<f64>>,
    },
    Scale {
        x: Parent,
        c: f64,
    },
    Matmul {
        a: Parent,
        b: Parent,
        a_vals: Arc<Vec<f64>>,
        b_vals: Arc<Vec<f64>>,
        m: usize,
        k: usize,
        n: usize,
    },
    AddBias {
        x: Parent,
        bias: Parent,
        rows: usize,
        cols: usize,
    },
    LeakyRelu {
        x: Parent,
        slope: f64,
        x_vals: Arc<Vec<f64>>,
    },
    SegmentMax {
        x: Parent,
        argmax: Vec<usize>,
    },
    SegmentSum {
        x: Parent,
        segments: Arc<Vec<usize>>,
        cols: usize,
    },
    GatherRows {
        x: Parent,
        idx: Arc<Vec<usize>>,
        cols: usize,
    },
    ConcatCols {
        a: Parent,
        b: Parent,
        rows: usize,
        ca: usize,
        cb: usize,
    },
    RowSum {
        x: Parent,
        rows: usize,
        cols: usize,
    },
    Reshape {
        x: Parent,
    },
    Softmax {
        x: Parent,
        lanes: Lanes,
        p_vals: Arc<Vec<f64>>,
    },
    LogSumExp {
        x: Parent,
        lanes: Lanes,
        p_vals: Arc<Vec<f64>>,
    },
    L1Loss {
        a: Parent,
        b: Parent,
        a_vals: Arc<Vec<f64>>,
        b_vals: Arc<Vec<f64>>,
        inv_rows: f64,
    },
    SumAll {
        x: Parent,
        in_len: usize,
    },
    MinPlus {
        msg: Parent,
        pair: Parent,
        argmin: Vec<usize>,
        labels: usize,
    },
    RowMinNorm {
        x: Parent,
        argmin: Vec<usize>,
        rows: usize,
        cols: usize,
    },
    WeightedSum {
        w: Parent,
        table: Parent,
        w_vals: Arc<Vec<f64>>,
        table_vals: Arc<Vec<f64>>,
        n: usize,
        l: usize,
        c: usize,
    },
}

/// Addressing for reductions along one axis of a (conceptually 2-D) tensor.
#[derive(Clone, Copy)]
struct Lanes {
    count: usize,
    len: usize,
    lane_stride: usize,
    elem_stride: usize,
}

impl Lanes {
    fn for_axis(rows: usize, cols: usize, axis: usize) -> Self {
        if axis == 1 {
            Lanes {
                count: rows,
                len: cols,
                lane_stride: cols,
                elem_stride: 1,
            }
        } else {
            Lanes {
                count: cols,
                len: rows,
                lane_stride: 1,
                elem_stride: cols,
            }
        }
    }

    fn index(&self, lane: usize, elem: usize) -> usize {
        lane * self.lane_stride + elem * self.elem_stride
    }
}

struct Record {
    op: Op,
    out_shape: Vec<usize>,
}

/// Ordered operation log for one forward pass.
///
/// Records are appended in execution order, so parents always precede their
/// consumers and the backward pass is a single reverse sweep. A tape is meant
/// to live for exactly one forward/backward cycle and is not thread-safe.
pub struct Tape {
    id: u64,
    records: Vec<Record>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn parent(&self, t: &Tensor, op: &'static str) -> Result<Parent> {
        match t.node() {
            None => Ok(None),
            Some(node) if node.tape == self.id => Ok(Some(node.index)),
            Some(_) => Err(Error::ForeignTape { op }),
        }
    }

    fn push(&mut self, op: Op, out_shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        let index = self.records.len();
        self.records.push(Record {
            op,
            out_shape: out_shape.clone(),
        });
        Tensor::attached(
            out_shape,
            values,
            NodeRef {
                tape: self.id,
                index,
            },
        )
    }

    /// Emit either a recorded tensor (any input attached) or a plain constant.
    fn emit(
        &mut self,
        attached: bool,
        op: impl FnOnce() -> Op,
        out_shape: Vec<usize>,
        values: Vec<f64>,
    ) -> Tensor {
        if attached {
            self.push(op(), out_shape, values)
        } else {
            Tensor::attached_or_free(out_shape, values)
        }
    }

    /// Attach a constant tensor as a differentiable leaf (parameter).
    pub fn leaf(&mut self, t: &Tensor) -> Result<Tensor> {
        if t.node().is_some() {
            return Err(Error::AlreadyAttached);
        }
        Ok(self.push(Op::Leaf, t.shape().to_vec(), t.values().to_vec()))
    }

    fn binary_broadcast(
        &mut self,
        a: &Tensor,
        b: &Tensor,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make_op: impl FnOnce(Parent, Parent, &Tensor, &Tensor) -> Op,
    ) -> Result<Tensor> {
        let pa = self.parent(a, op_name)?;
        let pb = self.parent(b, op_name)?;
        let out = if a.shape() == b.shape() {
            a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect()
        } else if b.is_scalar() {
            let y = b.item();
            a.values().iter().map(|&x| f(x, y)).collect()
        } else if a.is_scalar() {
            let x = a.item();
            b.values().iter().map(|&y| f(x, y)).collect()
        } else {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        };
        let out_shape = if a.is_scalar() && !b.is_scalar() {
            b.shape().to_vec()
        } else {
            a.shape().to_vec()
        };
        let attached = pa.is_some() || pb.is_some();
        Ok(self.emit(attached, || make_op(pa, pb, a, b), out_shape, out))
    }

    /// Elementwise sum; shapes must match exactly or one side must be scalar.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_broadcast(a, b, "add", |x, y| x + y, |pa, pb, a, b| Op::Add {
            a: pa,
            b: pb,
            a_len: a.len(),
            b_len: b.len(),
        })
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_broadcast(a, b, "sub", |x, y| x - y, |pa, pb, a, b| Op::Sub {
            a: pa,
            b: pb,
            a_len: a.len(),
            b_len: b.len(),
        })
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_broadcast(a, b, "mul", |x, y| x * y, |pa, pb, a, b| Op::Mul {
            a: pa,
            b: pb,
            a_vals: a.values_arc(),
            b_vals: b.values_arc(),
        })
    }

    /// Multiply by a compile-time constant scalar.
    pub fn scale(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        let px = self.parent(x, "scale")?;
        let out = x.values().iter().map(|&v| v * c).collect();
        Ok(self.emit(px.is_some(), || Op::Scale { x: px, c }, x.shape().to_vec(), out))
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(a, "matmul")?;
        let (k2, n) = dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let pa = self.parent(a, "matmul")?;
        let pb = self.parent(b, "matmul")?;
        let av = a.values();
        let bv = b.values();
        let mut out = vec![0.0; m * n];
        // i-k-j order keeps the inner loop contiguous in both b and out.
        for i in 0..m {
            for kk in 0..k {
                let aik = av[i * k + kk];
                if aik == 0.0 {
                    continue;
                }
                let brow = &bv[kk * n..(kk + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aik * brow[j];
                }
            }
        }
        let attached = pa.is_some() || pb.is_some();
        Ok(self.emit(
            attached,
            || Op::Matmul {
                a: pa,
                b: pb,
                a_vals: a.values_arc(),
                b_vals: b.values_arc(),
                m,
                k,
                n,
            },
            vec![m, n],
            out,
        ))
    }

    /// Add a length-C bias vector to every row of an R x C tensor.
    pub fn add_bias(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (rows, cols) = dims2(x, "add_bias")?;
        if bias.shape() != [cols] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: x.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let px = self.parent(x, "add_bias")?;
        let pb = self.parent(bias, "add_bias")?;
        let bv = bias.values();
        let out = x
            .values()
            .chunks_exact(cols.max(1))
            .flat_map(|row| row.iter().zip(bv).map(|(&v, &b)| v + b))
            .collect();
        let attached = px.is_some() || pb.is_some();
        Ok(self.emit(
            attached,
            || Op::AddBias {
                x: px,
                bias: pb,
                rows,
                cols,
            },
            vec![rows, cols],
            out,
        ))
    }

    /// y = x for x > 0, slope * x otherwise; the subgradient at 0 takes the
    /// positive branch.
    pub fn leaky_relu(&mut self, x: &Tensor, slope: f64) -> Result<Tensor> {
        let px = self.parent(x, "leaky_relu")?;
        let out = x
            .values()
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        Ok(self.emit(
            px.is_some(),
            || Op::LeakyRelu {
                x: px,
                slope,
                x_vals: x.values_arc(),
            },
            x.shape().to_vec(),
            out,
        ))
    }

    /// Per-segment, per-channel max over the rows of an E x C tensor.
    ///
    /// Every segment id below `n_segments` must occur at least once. The
    /// gradient routes to the argmax row, first occurrence on ties.
    pub fn segment_max(
        &mut self,
        x: &Tensor,
        segments: &[usize],
        n_segments: usize,
    ) -> Result<Tensor> {
        let (rows, cols) = dims2(x, "segment_max")?;
        if segments.len() != rows {
            return Err(Error::InvalidShape {
                op: "segment_max",
                shape: x.shape().to_vec(),
                detail: format!("{} segment ids for {rows} rows", segments.len()),
            });
        }
        let px = self.parent(x, "segment_max")?;
        let xv = x.values();
        let mut out = vec![f64::NEG_INFINITY; n_segments * cols];
        let mut argmax = vec![usize::MAX; n_segments * cols];
        for (e, &s) in segments.iter().enumerate() {
            if s >= n_segments {
                return Err(Error::IndexOutOfBounds {
                    op: "segment_max",
                    index: s,
                    bound: n_segments,
                });
            }
            for c in 0..cols {
                let v = xv[e * cols + c];
                let o = s * cols + c;
                if v > out[o] || argmax[o] == usize::MAX {
                    out[o] = v;
                    argmax[o] = e * cols + c;
                }
            }
        }
        if cols > 0 {
            if let Some(s) = (0..n_segments).find(|s| argmax[s * cols] == usize::MAX) {
                return Err(Error::EmptySegment { segment: s });
            }
        }
        Ok(self.emit(
            px.is_some(),
            || Op::SegmentMax { x: px, argmax },
            vec![n_segments, cols],
            out,
        ))
    }

    /// Per-segment, per-channel sum; empty segments yield zero rows.
    pub fn segment_sum(
        &mut self,
        x: &Tensor,
        segments: &[usize],
        n_segments: usize,
    ) -> Result<Tensor> {
        let (rows, cols) = dims2(x, "segment_sum")?;
        if segments.len() != rows {
            return Err(Error::InvalidShape {
                op: "segment_sum",
                shape: x.shape().to_vec(),
                detail: format!("{} segment ids for {rows} rows", segments.len()),
            });
        }
        let px = self.parent(x, "segment_sum")?;
        let xv = x.values();
        let mut out = vec![0.0; n_segments * cols];
        for (e, &s) in segments.iter().enumerate() {
            if s >= n_segments {
                return Err(Error::IndexOutOfBounds {
                    op: "segment_sum",
                    index: s,
                    bound: n_segments,
                });
            }
            for c in 0..cols {
                out[s * cols + c] += xv[e * cols + c];
            }
        }
        let segs = Arc::new(segments.to_vec());
        Ok(self.emit(
            px.is_some(),
            || Op::SegmentSum {
                x: px,
                segments: segs,
                cols,
            },
            vec![n_segments, cols],
            out,
        ))
    }

    /// Select rows of an N x C tensor by index, with repetition allowed.
    pub fn gather_rows(&mut self, x: &Tensor, idx: &[usize]) -> Result<Tensor> {
        let (rows, cols) = dims2(x, "gather_rows")?;
        let px = self.parent(x, "gather_rows")?;
        let xv = x.values();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::IndexOutOfBounds {
                    op: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            out.extend_from_slice(&xv[i * cols..(i + 1) * cols]);
        }
        let ids = Arc::new(idx.to_vec());
        let n_out = idx.len();
        Ok(self.emit(
            px.is_some(),
            || Op::GatherRows {
                x: px,
                idx: ids,
                cols,
            },
            vec![n_out, cols],
            out,
        ))
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ra, ca) = dims2(a, "concat_cols")?;
        let (rb, cb) = dims2(b, "concat_cols")?;
        if ra != rb {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let pa = self.parent(a, "concat_cols")?;
        let pb = self.parent(b, "concat_cols")?;
        let av = a.values();
        let bv = b.values();
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&av[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        let attached = pa.is_some() || pb.is_some();
        Ok(self.emit(
            attached,
            || Op::ConcatCols {
                a: pa,
                b: pb,
                rows: ra,
                ca,
                cb,
            },
            vec![ra, ca + cb],
            out,
        ))
    }

    /// Sum along axis 1: R x C -> R.
    pub fn row_sum(&mut self, x: &Tensor) -> Result<Tensor> {
        let (rows, cols) = dims2(x, "row_sum")?;
        let px = self.parent(x, "row_sum")?;
        let out = x
            .values()
            .chunks_exact(cols.max(1))
            .map(|row| row.iter().sum())
            .collect();
        Ok(self.emit(
            px.is_some(),
            || Op::RowSum { x: px, rows, cols },
            vec![rows],
            out,
        ))
    }

    /// Reinterpret the value buffer under a new shape of equal length.
    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != x.len() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                detail: format!("cannot hold {} values", x.len()),
            });
        }
        let px = self.parent(x, "reshape")?;
        Ok(self.emit(
            px.is_some(),
            || Op::Reshape { x: px },
            shape.to_vec(),
            x.values().to_vec(),
        ))
    }

    fn lanes_for(x: &Tensor, axis: usize, op: &'static str) -> Result<Lanes> {
        match x.shape() {
            [n] => {
                if axis != 0 {
                    return Err(Error::InvalidShape {
                        op,
                        shape: x.shape().to_vec(),
                        detail: format!("axis {axis} out of range for 1-D"),
                    });
                }
                Ok(Lanes::for_axis(1, *n, 1))
            }
            [r, c] => {
                if axis > 1 {
                    return Err(Error::InvalidShape {
                        op,
                        shape: x.shape().to_vec(),
                        detail: format!("axis {axis} out of range for 2-D"),
                    });
                }
                Ok(Lanes::for_axis(*r, *c, axis))
            }
            other => Err(Error::InvalidShape {
                op,
                shape: other.to_vec(),
                detail: "expected a 1-D or 2-D tensor".into(),
            }),
        }
    }

    fn softmax_values(xv: &[f64], lanes: Lanes) -> Vec<f64> {
        let mut p = vec![0.0; xv.len()];
        for lane in 0..lanes.count {
            let mut max = f64::NEG_INFINITY;
            for e in 0..lanes.len {
                max = max.max(xv[lanes.index(lane, e)]);
            }
            let mut sum = 0.0;
            for e in 0..lanes.len {
                let i = lanes.index(lane, e);
                p[i] = (xv[i] - max).exp();
                sum += p[i];
            }
            for e in 0..lanes.len {
                p[lanes.index(lane, e)] /= sum;
            }
        }
        p
    }

    /// Numerically stable softmax along `axis`; each lane sums to 1.
    pub fn softmax(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let lanes = Self::lanes_for(x, axis, "softmax")?;
        let px = self.parent(x, "softmax")?;
        let p = Self::softmax_values(x.values(), lanes);
        let arc = Arc::new(p.clone());
        Ok(self.emit(
            px.is_some(),
            || Op::Softmax {
                x: px,
                lanes,
                p_vals: arc,
            },
            x.shape().to_vec(),
            p,
        ))
    }

    /// log(sum(exp(x))) along `axis`, max-shifted; reduces that axis away.
    pub fn logsumexp(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let lanes = Self::lanes_for(x, axis, "logsumexp")?;
        let px = self.parent(x, "logsumexp")?;
        let xv = x.values();
        let mut out = vec![0.0; lanes.count];
        for lane in 0..lanes.count {
            let mut max = f64::NEG_INFINITY;
            for e in 0..lanes.len {
                max = max.max(xv[lanes.index(lane, e)]);
            }
            let sum: f64 = (0..lanes.len)
                .map(|e| (xv[lanes.index(lane, e)] - max).exp())
                .sum();
            out[lane] = max + sum.ln();
        }
        let out_shape = match x.shape() {
            [_] => vec![],
            [r, c] => {
                if axis == 1 {
                    vec![*r]
                } else {
                    vec![*c]
                }
            }
            _ => unreachable!(),
        };
        let p = Arc::new(Self::softmax_values(xv, lanes));
        Ok(self.emit(
            px.is_some(),
            || Op::LogSumExp {
                x: px,
                lanes,
                p_vals: p,
            },
            out_shape,
            out,
        ))
    }

    /// Sum of absolute differences divided by the number of rows: mean over
    /// rows, sum over the per-row components. Subgradient 0 at exact ties.
    pub fn l1_loss(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "l1_loss",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let pa = self.parent(a, "l1_loss")?;
        let pb = self.parent(b, "l1_loss")?;
        let rows = a.rows().max(1);
        let inv_rows = 1.0 / rows as f64;
        let total: f64 = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        let attached = pa.is_some() || pb.is_some();
        Ok(self.emit(
            attached,
            || Op::L1Loss {
                a: pa,
                b: pb,
                a_vals: a.values_arc(),
                b_vals: b.values_arc(),
                inv_rows,
            },
            vec![],
            vec![total * inv_rows],
        ))
    }

    /// Sum of every entry, as a scalar.
    pub fn sum_all(&mut self, x: &Tensor) -> Result<Tensor> {
        let px = self.parent(x, "sum_all")?;
        let total: f64 = x.values().iter().sum();
        let in_len = x.len();
        Ok(self.emit(
            px.is_some(),
            || Op::SumAll { x: px, in_len },
            vec![],
            vec![total],
        ))
    }

    /// Batched min-plus contraction used by min-sum message passing:
    /// `out[e, j] = min_i (msg[e, i] + pair[e, i, j])`.
    ///
    /// The gradient routes to the argmin `i` (first index on ties) for both
    /// inputs.
    pub fn min_plus(&mut self, msg: &Tensor, pair: &Tensor) -> Result<Tensor> {
        let (e_msg, l_msg) = dims2(msg, "min_plus")?;
        let (e_pair, l_in, l_out) = dims3(pair, "min_plus")?;
        if e_msg != e_pair || l_msg != l_in || l_in != l_out {
            return Err(Error::ShapeMismatch {
                op: "min_plus",
                lhs: msg.shape().to_vec(),
                rhs: pair.shape().to_vec(),
            });
        }
        let pm = self.parent(msg, "min_plus")?;
        let pp = self.parent(pair, "min_plus")?;
        let mv = msg.values();
        let pv = pair.values();
        let labels = l_msg;
        let mut out = vec![0.0; e_msg * labels];
        let mut argmin = vec![0usize; e_msg * labels];
        for e in 0..e_msg {
            let m_row = &mv[e * labels..(e + 1) * labels];
            let p_block = &pv[e * labels * labels..(e + 1) * labels * labels];
            for j in 0..labels {
                let mut best = f64::INFINITY;
                let mut best_i = 0;
                for (i, &mi) in m_row.iter().enumerate() {
                    let v = mi + p_block[i * labels + j];
                    if v < best {
                        best = v;
                        best_i = i;
                    }
                }
                out[e * labels + j] = best;
                argmin[e * labels + j] = best_i;
            }
        }
        let attached = pm.is_some() || pp.is_some();
        Ok(self.emit(
            attached,
            || Op::MinPlus {
                msg: pm,
                pair: pp,
                argmin,
                labels,
            },
            vec![e_msg, labels],
            out,
        ))
    }

    /// Subtract each row's minimum from the row (first argmin on ties).
    pub fn row_min_normalize(&mut self, x: &Tensor) -> Result<Tensor> {
        let (rows, cols) = dims2(x, "row_min_normalize")?;
        if cols == 0 {
            return Err(Error::InvalidShape {
                op: "row_min_normalize",
                shape: x.shape().to_vec(),
                detail: "rows must be non-empty".into(),
            });
        }
        let px = self.parent(x, "row_min_normalize")?;
        let xv = x.values();
        let mut out = vec![0.0; xv.len()];
        let mut argmin = vec![0usize; rows];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mut best = f64::INFINITY;
            let mut best_c = 0;
            for (c, &v) in row.iter().enumerate() {
                if v < best {
                    best = v;
                    best_c = c;
                }
            }
            argmin[r] = best_c;
            for c in 0..cols {
                out[r * cols + c] = row[c] - best;
            }
        }
        Ok(self.emit(
            px.is_some(),
            || Op::RowMinNorm {
                x: px,
                argmin,
                rows,
                cols,
            },
            vec![rows, cols],
            out,
        ))
    }

    /// Per-row weighted sum over a table of per-label vectors:
    /// `out[n, c] = sum_l w[n, l] * table[n, l, c]`.
    pub fn weighted_sum(&mut self, w: &Tensor, table: &Tensor) -> Result<Tensor> {
        let (n_w, l_w) = dims2(w, "weighted_sum")?;
        let (n_t, l_t, c) = dims3(table, "weighted_sum")?;
        if n_w != n_t || l_w != l_t {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                lhs: w.shape().to_vec(),
                rhs: table.shape().to_vec(),
            });
        }
        let pw = self.parent(w, "weighted_sum")?;
        let pt = self.parent(table, "weighted_sum")?;
        let wv = w.values();
        let tv = table.values();
        let mut out = vec![0.0; n_w * c];
        for n in 0..n_w {
            for l in 0..l_w {
                let weight = wv[n * l_w + l];
                let t_row = &tv[(n * l_w + l) * c..(n * l_w + l + 1) * c];
                let o_row = &mut out[n * c..(n + 1) * c];
                for cc in 0..c {
                    o_row[cc] += weight * t_row[cc];
                }
            }
        }
        let attached = pw.is_some() || pt.is_some();
        Ok(self.emit(
            attached,
            || Op::WeightedSum {
                w: pw,
                table: pt,
                w_vals: w.values_arc(),
                table_vals: table.values_arc(),
                n: n_w,
                l: l_w,
                c,
            },
            vec![n_w, c],
            out,
        ))
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every node;
    /// leaves not reachable from the loss read back as zeros.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let node = loss.node().ok_or(Error::DetachedLoss)?;
        if node.tape != self.id {
            return Err(Error::ForeignTape { op: "backward" });
        }
        if !loss.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: loss.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.records.len());
        grads.resize_with(self.records.len(), || None);
        grads[node.index] = Some(vec![1.0]);

        for i in (0..=node.index).rev() {
            let (head, tail) = grads.split_at_mut(i);
            let Some(g) = tail[0].as_ref() else { continue };
            self.accumulate(i, g, head);
        }

        Ok(Gradients {
            tape: self.id,
            shapes: self.records.iter().map(|r| r.out_shape.clone()).collect(),
            grads,
        })
    }

    fn accumulate(&self, index: usize, g: &[f64], head: &mut [Option<Vec<f64>>]) {
        // Fetch-or-init a parent gradient buffer. Parents are handled one at
        // a time so aliasing inputs (e.g. add(x, x)) accumulate correctly.
        fn slot<'h>(
            head: &'h mut [Option<Vec<f64>>],
            parent: Parent,
            records: &[Record],
        ) -> Option<&'h mut Vec<f64>> {
            let p = parent?;
            let len = records[p].out_shape.iter().product();
            let s = &mut head[p];
            if s.is_none() {
                *s = Some(vec![0.0; len]);
            }
            s.as_mut()
        }
        macro_rules! grad_of {
            ($p:expr) => {
                slot(head, $p, &self.records)
            };
        }

        match &self.records[index].op {
            Op::Leaf => {}
            Op::Add { a, b, a_len, b_len } => {
                if let Some(ga) = grad_of!(*a) {
                    add_broadcast(ga, g, *a_len);
                }
                if let Some(gb) = grad_of!(*b) {
                    add_broadcast(gb, g, *b_len);
                }
            }
            Op::Sub { a, b, a_len, b_len } => {
                if let Some(ga) = grad_of!(*a) {
                    add_broadcast(ga, g, *a_len);
                }
                if let Some(gb) = grad_of!(*b) {
                    sub_broadcast(gb, g, *b_len);
                }
            }
            Op::Mul { a, b, a_vals, b_vals } => {
                if let Some(ga) = grad_of!(*a) {
                    mul_broadcast(ga, g, b_vals, a_vals.len());
                }
                if let Some(gb) = grad_of!(*b) {
                    mul_broadcast(gb, g, a_vals, b_vals.len());
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = grad_of!(*x) {
                    for (gi, &go) in gx.iter_mut().zip(g) {
                        *gi += c * go;
                    }
                }
            }
            Op::Matmul {
                a,
                b,
                a_vals,
                b_vals,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                if let Some(ga) = grad_of!(*a) {
                    // dA = g . B^T
                    for i in 0..m {
                        for j in 0..k {
                            let mut s = 0.0;
                            for c in 0..n {
                                s += g[i * n + c] * b_vals[j * n + c];
                            }
                            ga[i * k + j] += s;
                        }
                    }
                }
                if let Some(gb) = grad_of!(*b) {
                    // dB = A^T . g
                    for i in 0..m {
                        for j in 0..k {
                            let aij = a_vals[i * k + j];
                            if aij == 0.0 {
                                continue;
                            }
                            for c in 0..n {
                                gb[j * n + c] += aij * g[i * n + c];
                            }
                        }
                    }
                }
            }
            Op::AddBias { x, bias, rows, cols } => {
                if let Some(gx) = grad_of!(*x) {
                    for (gi, &go) in gx.iter_mut().zip(g) {
                        *gi += go;
                    }
                }
                if let Some(gb) = grad_of!(*bias) {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            gb[c] += g[r * cols + c];
                        }
                    }
                }
            }
            Op::LeakyRelu { x, slope, x_vals } => {
                if let Some(gx) = grad_of!(*x) {
                    for i in 0..gx.len() {
                        let factor = if x_vals[i] >= 0.0 { 1.0 } else { *slope };
                        gx[i] += factor * g[i];
                    }
                }
            }
            Op::SegmentMax { x, argmax } => {
                if let Some(gx) = grad_of!(*x) {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                }
            }
            Op::SegmentSum { x, segments, cols } => {
                if let Some(gx) = grad_of!(*x) {
                    for (e, &s) in segments.iter().enumerate() {
                        for c in 0..*cols {
                            gx[e * cols + c] += g[s * cols + c];
                        }
                    }
                }
            }
            Op::GatherRows { x, idx, cols } => {
                if let Some(gx) = grad_of!(*x) {
                    for (e, &i) in idx.iter().enumerate() {
                        for c in 0..*cols {
                            gx[i * cols + c] += g[e * cols + c];
                        }
                    }
                }
            }
            Op::ConcatCols { a, b, rows, ca, cb } => {
                let cols = ca + cb;
                if let Some(ga) = grad_of!(*a) {
                    for r in 0..*rows {
                        for c in 0..*ca {
                            ga[r * ca + c] += g[r * cols + c];
                        }
                    }
                }
                if let Some(gb) = grad_of!(*b) {
                    for r in 0..*rows {
                        for c in 0..*cb {
                            gb[r * cb + c] += g[r * cols + ca + c];
                        }
                    }
                }
            }
            Op::RowSum { x, rows, cols } => {
                if let Some(gx) = grad_of!(*x) {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            gx[r * cols + c] += g[r];
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = grad_of!(*x) {
                    for (gi, &go) in gx.iter_mut().zip(g) {
                        *gi += go;
                    }
                }
            }
            Op::Softmax { x, lanes, p_vals } => {
                if let Some(gx) = grad_of!(*x) {
                    for lane in 0..lanes.count {
                        let mut dot = 0.0;
                        for e in 0..lanes.len {
                            let i = lanes.index(lane, e);
                            dot += g[i] * p_vals[i];
                        }
                        for e in 0..lanes.len {
                            let i = lanes.index(lane, e);
                            gx[i] += p_vals[i] * (g[i] - dot);
                        }
                    }
                }
            }
            Op::LogSumExp { x, lanes, p_vals } => {
                if let Some(gx) = grad_of!(*x) {
                    for lane in 0..lanes.count {
                        for e in 0..lanes.len {
                            let i = lanes.index(lane, e);
                            gx[i] += g[lane] * p_vals[i];
                        }
                    }
                }
            }
            Op::L1Loss {
                a,
                b,
                a_vals,
                b_vals,
                inv_rows,
            } => {
                let scale = g[0] * inv_rows;
                if let Some(ga) = grad_of!(*a) {
                    for i in 0..ga.len() {
                        ga[i] += scale * sign(a_vals[i] - b_vals[i]);
                    }
                }
                if let Some(gb) = grad_of!(*b) {
                    for i in 0..gb.len() {
                        gb[i] -= scale * sign(a_vals[i] - b_vals[i]);
                    }
                }
            }
            Op::SumAll { x, in_len } => {
                if let Some(gx) = grad_of!(*x) {
                    for gi in gx.iter_mut().take(*in_len) {
                        *gi += g[0];
                    }
                }
            }
            Op::MinPlus {
                msg,
                pair,
                argmin,
                labels,
            } => {
                let l = *labels;
                if let Some(gm) = grad_of!(*msg) {
                    for (o, &i) in argmin.iter().enumerate() {
                        let e = o / l;
                        gm[e * l + i] += g[o];
                    }
                }
                if let Some(gp) = grad_of!(*pair) {
                    for (o, &i) in argmin.iter().enumerate() {
                        let e = o / l;
                        let j = o % l;
                        gp[(e * l + i) * l + j] += g[o];
                    }
                }
            }
            Op::RowMinNorm {
                x,
                argmin,
                rows,
                cols,
            } => {
                if let Some(gx) = grad_of!(*x) {
                    for r in 0..*rows {
                        let mut row_total = 0.0;
                        for c in 0..*cols {
                            let go = g[r * cols + c];
                            gx[r * cols + c] += go;
                            row_total += go;
                        }
                        gx[r * cols + argmin[r]] -= row_total;
                    }
                }
            }
            Op::WeightedSum {
                w,
                table,
                w_vals,
                table_vals,
                n,
                l,
                c,
            } => {
                let (n, l, c) = (*n, *l, *c);
                if let Some(gw) = grad_of!(*w) {
                    for i in 0..n {
                        for j in 0..l {
                            let mut s = 0.0;
                            for cc in 0..c {
                                s += g[i * c + cc] * table_vals[(i * l + j) * c + cc];
                            }
                            gw[i * l + j] += s;
                        }
                    }
                }
                if let Some(gt) = grad_of!(*table) {
                    for i in 0..n {
                        for j in 0..l {
                            let weight = w_vals[i * l + j];
                            for cc in 0..c {
                                gt[(i * l + j) * c + cc] += weight * g[i * c + cc];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add_broadcast(gp: &mut [f64], g: &[f64], p_len: usize) {
    if p_len == g.len() {
        for (gi, &go) in gp.iter_mut().zip(g) {
            *gi += go;
        }
    } else {
        debug_assert_eq!(p_len, 1);
        gp[0] += g.iter().sum::<f64>();
    }
}

fn sub_broadcast(gp: &mut [f64], g: &[f64], p_len: usize) {
    if p_len == g.len() {
        for (gi, &go) in gp.iter_mut().zip(g) {
            *gi -= go;
        }
    } else {
        debug_assert_eq!(p_len, 1);
        gp[0] -= g.iter().sum::<f64>();
    }
}

/// d(a*b)/da accumulated with broadcasting: `other` is the co-factor.
fn mul_broadcast(gp: &mut [f64], g: &[f64], other: &[f64], p_len: usize) {
    if p_len == g.len() {
        if other.len() == g.len() {
            for i in 0..g.len() {
                gp[i] += g[i] * other[i];
            }
        } else {
            let o = other[0];
            for i in 0..g.len() {
                gp[i] += g[i] * o;
            }
        }
    } else {
        debug_assert_eq!(p_len, 1);
        let mut s = 0.0;
        for i in 0..g.len() {
            s += g[i] * other[i];
        }
        gp[0] += s;
    }
}

/// Gradient map produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to a tape-attached tensor. Unreached nodes read
    /// back as zeros; tensors from other tapes (or constants) return `None`.
    pub fn wrt(&self, t: &Tensor) -> Option<Tensor> {
        let node = t.node()?;
        if node.tape != self.tape {
            return None;
        }
        let shape = &self.shapes[node.index];
        Some(match &self.grads[node.index] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        })
    }
}

impl Tensor {
    pub(crate) fn attached_or_free(shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        Tensor::new(&shape, values).expect("op output shape")
    }
}
