//! Forward and reverse passes of the encoder and the denoiser.

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis, Zip};

use super::{
    context, shape_err, Linear, ModelError, ModelParams, ShapeEmbedding, LOCAL_K,
    POINT_FEATURE_DIM, SQUAREPLUS_B,
};
use crate::geom::{self, PointCloud};
use crate::Real;

#[inline]
fn squareplus<T: Real>(y: T) -> T {
    (y + (y * y + T::lit(SQUAREPLUS_B)).sqrt()) * T::lit(0.5)
}

#[inline]
fn squareplus_grad<T: Real>(y: T) -> T {
    (T::one() + y / (y * y + T::lit(SQUAREPLUS_B)).sqrt()) * T::lit(0.5)
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn affine<T: Real>(x: &ArrayView2<T>, l: &Linear<T>) -> Array2<T> {
    let mut y = x.dot(&l.weight);
    y += &l.bias;
    y
}

/// `dst += a^T b` for row-major `a`, `b`.
fn add_at_b<T: Real>(dst: &mut Array2<T>, a: &ArrayView2<T>, b: &ArrayView2<T>) {
    general_mat_mul(T::one(), &a.t(), b, T::one(), dst);
}

/// `dst += outer(a, b)`.
fn add_outer<T: Real>(dst: &mut Array2<T>, a: &Array1<T>, b: &Array1<T>) {
    let a = a.view().insert_axis(Axis(1));
    let b = b.view().insert_axis(Axis(0));
    general_mat_mul(T::one(), &a, &b, T::one(), dst);
}

fn check_points<T>(what: &str, a: &Array2<T>, n: usize) -> Result<(), ModelError> {
    if a.dim() != (n, 3) {
        return Err(shape_err(what, &[n, 3], a.shape()));
    }
    Ok(())
}

/// Intermediate values kept for the encoder's reverse pass.
pub(crate) struct EncoderTape<T> {
    /// Input of each per-point layer.
    inputs: Vec<Array2<T>>,
    /// Pre-activation of each hidden layer (all but the pooled one).
    pre: Vec<Array2<T>>,
    /// Row achieving the max of each pooled channel (lowest index on ties).
    argmax: Vec<usize>,
    pooled: Array1<T>,
}

pub(crate) fn encoder_forward<T: Real>(
    points: &Array2<T>,
    params: &ModelParams<T>,
) -> Result<(ShapeEmbedding<T>, EncoderTape<T>), ModelError> {
    if points.nrows() == 0 {
        return Err(ModelError::EmptyCloud);
    }
    check_points("encoder input", points, points.nrows())?;
    let layers = &params.encoder;
    let mut inputs = vec![points.clone()];
    let mut pre = Vec::with_capacity(layers.len() - 1);
    for l in &layers[..layers.len() - 1] {
        let y = affine(&inputs.last().expect("non-empty").view(), l);
        inputs.push(y.mapv(squareplus));
        pre.push(y);
    }
    let feats = affine(
        &inputs.last().expect("non-empty").view(),
        layers.last().expect("validated"),
    );
    let width = feats.ncols();
    let mut pooled = feats.row(0).to_owned();
    let mut argmax = vec![0usize; width];
    for (i, row) in feats.rows().into_iter().enumerate().skip(1) {
        for j in 0..width {
            if row[j] > pooled[j] {
                pooled[j] = row[j];
                argmax[j] = i;
            }
        }
    }
    let mut c = params.head.weight.t().dot(&pooled);
    c += &params.head.bias;
    Ok((
        ShapeEmbedding(c),
        EncoderTape {
            inputs,
            pre,
            argmax,
            pooled,
        },
    ))
}

/// Accumulates encoder gradients given `dL/dc`. Only rows that won a pooled
/// channel receive gradient.
pub(crate) fn encoder_backward<T: Real>(
    dc: &Array1<T>,
    tape: &EncoderTape<T>,
    params: &ModelParams<T>,
    grads: &mut ModelParams<T>,
) {
    add_outer(&mut grads.head.weight, &tape.pooled, dc);
    grads.head.bias += dc;
    let dpooled = params.head.weight.dot(dc);

    let mut rows = tape.argmax.clone();
    rows.sort_unstable();
    rows.dedup();
    let mut dz = Array2::zeros((rows.len(), dpooled.len()));
    for (j, &i) in tape.argmax.iter().enumerate() {
        let r = rows.binary_search(&i).expect("row listed");
        dz[[r, j]] += dpooled[j];
    }
    for l in (0..params.encoder.len()).rev() {
        let x = tape.inputs[l].select(Axis(0), &rows);
        add_at_b(&mut grads.encoder[l].weight, &x.view(), &dz.view());
        grads.encoder[l].bias += &dz.sum_axis(Axis(0));
        if l > 0 {
            let mut dx = dz.dot(&params.encoder[l].weight.t());
            let y = tape.pre[l - 1].select(Axis(0), &rows);
            Zip::from(&mut dx)
                .and(&y)
                .for_each(|d, &y| *d *= squareplus_grad(y));
            dz = dx;
        }
    }
}

/// Shape embedding of a cloud; exactly invariant to point order.
pub fn encode<T: Real>(pc: &PointCloud<T>, params: &ModelParams<T>) -> ShapeEmbedding<T> {
    encode_points(&pc.to_array(), params).expect("point clouds are non-empty N x 3")
}

/// [`encode`] on an `N x 3` array.
pub fn encode_points<T: Real>(
    points: &Array2<T>,
    params: &ModelParams<T>,
) -> Result<ShapeEmbedding<T>, ModelError> {
    encoder_forward(points, params).map(|(c, _)| c)
}

/// Intermediate values kept for the denoiser's reverse pass.
pub(crate) struct DenoiserTape<T> {
    inputs: Vec<Array2<T>>,
    /// `x Wx + bx` per layer.
    lin: Vec<Array2<T>>,
    /// Layer outputs before the ramp, hidden layers only.
    pre: Vec<Array2<T>>,
    gates: Vec<Array1<T>>,
}

pub(crate) fn denoiser_forward<T: Real>(
    features: &Array2<T>,
    delta_t: &Array2<T>,
    ctx: &Array1<T>,
    params: &ModelParams<T>,
    record: bool,
) -> (Array2<T>, Option<DenoiserTape<T>>) {
    let layers = &params.denoiser;
    let mut tape = DenoiserTape {
        inputs: Vec::new(),
        lin: Vec::new(),
        pre: Vec::new(),
        gates: Vec::new(),
    };
    let mut x = concatenate![Axis(1), delta_t.view(), features.view()];
    for (i, l) in layers.iter().enumerate() {
        let mut gate = l.gate.weight.t().dot(ctx);
        gate += &l.gate.bias;
        gate.mapv_inplace(sigmoid);
        let hb = l.hyper_weight.t().dot(ctx);
        let u = affine(&x.view(), &l.layer);
        let (mut y, lin) = if record {
            (&u * &gate, Some(u))
        } else {
            let mut u = u;
            u *= &gate;
            (u, None)
        };
        y += &hb;
        if let Some(lin) = lin {
            tape.inputs.push(std::mem::take(&mut x));
            tape.lin.push(lin);
            tape.gates.push(gate);
        }
        if i + 1 == layers.len() {
            y += delta_t;
            return (y, record.then_some(tape));
        }
        x = y.mapv(squareplus);
        if record {
            tape.pre.push(y);
        }
    }
    unreachable!("denoiser has at least one layer")
}

/// Accumulates denoiser gradients given `dL/d(output)` and returns `dL/d(ctx)`.
pub(crate) fn denoiser_backward<T: Real>(
    dout: &Array2<T>,
    tape: &DenoiserTape<T>,
    ctx: &Array1<T>,
    params: &ModelParams<T>,
    grads: &mut ModelParams<T>,
) -> Array1<T> {
    let mut dctx = Array1::zeros(ctx.len());
    let mut dy = dout.clone();
    for i in (0..params.denoiser.len()).rev() {
        let l = &params.denoiser[i];
        let g = &mut grads.denoiser[i];
        let gate = &tape.gates[i];
        let lin = &tape.lin[i];

        let dhb = dy.sum_axis(Axis(0));
        add_outer(&mut g.hyper_weight, ctx, &dhb);
        dctx += &l.hyper_weight.dot(&dhb);

        let mut dgate = Array1::zeros(gate.len());
        for (drow, urow) in dy.rows().into_iter().zip(lin.rows()) {
            Zip::from(&mut dgate)
                .and(&drow)
                .and(&urow)
                .for_each(|s, &d, &u| *s += d * u);
        }
        Zip::from(&mut dgate)
            .and(gate)
            .for_each(|d, &s| *d *= s * (T::one() - s));
        add_outer(&mut g.gate.weight, ctx, &dgate);
        g.gate.bias += &dgate;
        dctx += &l.gate.weight.dot(&dgate);

        let mut du = dy;
        du *= gate;
        add_at_b(&mut g.layer.weight, &tape.inputs[i].view(), &du.view());
        g.layer.bias += &du.sum_axis(Axis(0));
        if i == 0 {
            break;
        }
        let mut dx = du.dot(&l.layer.weight.t());
        Zip::from(&mut dx)
            .and(&tape.pre[i - 1])
            .for_each(|d, &y| *d *= squareplus_grad(y));
        dy = dx;
    }
    dctx
}

/// Per-point conditioning features `[anchor, local offset]`. The local
/// offset is the anchor minus the centroid of its `LOCAL_K` nearest anchors
/// (itself included), divided by their mean distance, so it is scale-free
/// and vanishes on locally flat, evenly sampled surface.
pub fn point_features<T: Real>(anchors: &Array2<T>) -> Result<Array2<T>, ModelError> {
    let n = anchors.nrows();
    check_points("anchors", anchors, n)?;
    if n == 0 {
        return Err(ModelError::EmptyCloud);
    }
    let pc =
        PointCloud::from_array(anchors).map_err(|e| ModelError::InvalidCloud(e.to_string()))?;
    let k = LOCAL_K.min(n);
    let nn = geom::knn(&pc, &pc, k).map_err(|e| ModelError::InvalidCloud(e.to_string()))?;
    let pts = pc.points();
    let kk = T::from_count(k);
    let mut out = Array2::zeros((n, POINT_FEATURE_DIM));
    for (i, row) in nn.iter().enumerate() {
        let p = pts[i];
        let mut centroid = [T::zero(); 3];
        let mut spread = T::zero();
        for &j in row {
            for (a, c) in centroid.iter_mut().enumerate() {
                *c += pts[j].axis(a);
            }
            spread += p.dist_squared(pts[j]).sqrt();
        }
        spread /= kk;
        for a in 0..3 {
            out[[i, a]] = p.axis(a);
            // duplicates only: no scale to normalize by
            if spread > T::zero() {
                out[[i, 3 + a]] = (p.axis(a) - centroid[a] / kk) / spread;
            }
        }
    }
    Ok(out)
}

/// The concat-squash stack applied to `[delta_t, features]` per point, plus
/// `delta_t`. `features` come from [`point_features`] of the conditioning
/// cloud (the cloud `c` was computed from), index-aligned with `delta_t`.
pub fn denoise<T: Real>(
    features: &Array2<T>,
    delta_t: &Array2<T>,
    c: &ShapeEmbedding<T>,
    beta_t: T,
    params: &ModelParams<T>,
) -> Result<Array2<T>, ModelError> {
    check_points("displacement", delta_t, delta_t.nrows())?;
    if features.dim() != (delta_t.nrows(), POINT_FEATURE_DIM) {
        return Err(shape_err(
            "point features",
            &[delta_t.nrows(), POINT_FEATURE_DIM],
            features.shape(),
        ));
    }
    if delta_t.nrows() == 0 {
        return Err(ModelError::EmptyCloud);
    }
    Ok(denoiser_forward(features, delta_t, &context(c, beta_t), params, false).0)
}
