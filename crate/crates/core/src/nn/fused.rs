//! Fused per-channel bias, group normalization and 2x2 max pooling with
//! hand-written backward passes. The composed bias and norm spend most of
//! their time in strided reductions, and the stock max-pool backward
//! averages the gradient over each window instead of routing it.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor, WithDType};

fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s.as_slice::<T>()?[a..b]),
        None => candle_core::bail!("fused ops need contiguous operands"),
    }
}

macro_rules! float_dispatch {
    ($storage:expr, $body:ident, $($arg:expr),*) => {
        match $storage {
            CpuStorage::F32(_) => CpuStorage::F32($body::<f32>($($arg),*)?),
            CpuStorage::F64(_) => CpuStorage::F64($body::<f64>($($arg),*)?),
            _ => candle_core::bail!("fused ops support f32 and f64 only"),
        }
    };
}

/// Splits `[B, C, ...]` dims into batch, channels and the per-channel plane size.
fn bcp(dims: &[usize]) -> candle_core::Result<(usize, usize, usize)> {
    if dims.len() < 2 {
        candle_core::bail!("expected at least [B, C], got {dims:?}");
    }
    Ok((dims[0], dims[1], dims[2..].iter().product()))
}

struct ChannelBias;

fn bias_fwd<T: WithDType>(x: &[T], b: &[T], (_, c, p): (usize, usize, usize)) -> candle_core::Result<Vec<T>> {
    Ok(x.chunks(p).enumerate().flat_map(|(i, plane)| {
        let bias = b[i % c];
        plane.iter().map(move |&v| v + bias)
    }).collect())
}

impl CustomOp2 for ChannelBias {
    fn name(&self) -> &'static str {
        "channel-bias"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = bcp(l1.dims())?;
        if l2.dims() != [dims.1] {
            candle_core::bail!("bias shape {:?} does not match {} channels", l2.dims(), dims.1);
        }
        let out = float_dispatch!(s1, bias_fwd_dispatch, s1, l1, s2, l2, dims);
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, _b: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        Ok((Some(grad.clone()), Some(channel_sums(grad)?)))
    }
}

fn bias_fwd_dispatch<T: WithDType>(
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
    dims: (usize, usize, usize),
) -> candle_core::Result<Vec<T>> {
    bias_fwd(slice::<T>(s1, l1)?, slice::<T>(s2, l2)?, dims)
}

/// Sum of a `[B, C, ...]` tensor over every axis but the channel one.
pub fn channel_sums(t: &Tensor) -> candle_core::Result<Tensor> {
    let (b, c, p) = bcp(t.dims())?;
    t.contiguous()?.reshape((b, c, p))?.sum(2)?.sum(0)
}

/// `x + bias` with `bias` of shape `[C]` broadcast over `[B, C, ...]`.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op2(&bias.contiguous()?, ChannelBias)
}

#[derive(Debug, Clone, Copy)]
struct GroupNormOp {
    groups: usize,
    eps: f64,
}

/// Per (sample, group) mean and inverse standard deviation.
fn group_stats<T: WithDType>(x: &[T], len: usize, eps: f64) -> Vec<(f64, f64)> {
    x.chunks(len)
        .map(|g| {
            let n = g.len() as f64;
            let mean = g.iter().map(|v| v.to_f64()).sum::<f64>() / n;
            let var = g.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n;
            (mean, 1.0 / (var + eps).sqrt())
        })
        .collect()
}

impl GroupNormOp {
    fn check(&self, x: &Layout, gamma: &Layout, beta: &Layout) -> candle_core::Result<(usize, usize, usize)> {
        let (b, c, p) = bcp(x.dims())?;
        if gamma.dims() != [c] || beta.dims() != [c] || c % self.groups != 0 {
            candle_core::bail!("group norm: bad affine shapes {:?}/{:?} for {c} channels in {} groups", gamma.dims(), beta.dims(), self.groups);
        }
        Ok((b, c, p))
    }

    fn forward<T: WithDType>(&self, x: &[T], gamma: &[T], beta: &[T], (_, c, p): (usize, usize, usize)) -> candle_core::Result<Vec<T>> {
        let len = c / self.groups * p;
        let stats = group_stats(x, len, self.eps);
        let mut out = Vec::with_capacity(x.len());
        for (i, plane) in x.chunks(p).enumerate() {
            let ch = i % c;
            let (mean, inv) = stats[i * p / len];
            let (g, bt) = (gamma[ch].to_f64(), beta[ch].to_f64());
            out.extend(plane.iter().map(|v| T::from_f64((v.to_f64() - mean) * inv * g + bt)));
        }
        Ok(out)
    }

    /// Returns `dx` followed by `dgamma` and `dbeta`, flattened into one buffer.
    fn backward<T: WithDType>(&self, x: &[T], gamma: &[T], dy: &[T], (b, c, p): (usize, usize, usize)) -> candle_core::Result<Vec<T>> {
        let cg = c / self.groups;
        let len = cg * p;
        let stats = group_stats(x, len, self.eps);
        let mut dx = Vec::with_capacity(x.len() + 2 * c);
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        for s in 0..b * self.groups {
            let (mean, inv) = stats[s];
            let base = s * len;
            let (mut sum_dxhat, mut sum_dxhat_xhat) = (0.0, 0.0);
            for k in 0..cg {
                let ch = (s % self.groups) * cg + k;
                let g = gamma[ch].to_f64();
                for j in base + k * p..base + (k + 1) * p {
                    let xhat = (x[j].to_f64() - mean) * inv;
                    let d = dy[j].to_f64();
                    dbeta[ch] += d;
                    dgamma[ch] += d * xhat;
                    sum_dxhat += d * g;
                    sum_dxhat_xhat += d * g * xhat;
                }
            }
            let n = len as f64;
            let (m1, m2) = (sum_dxhat / n, sum_dxhat_xhat / n);
            for k in 0..cg {
                let ch = (s % self.groups) * cg + k;
                let g = gamma[ch].to_f64();
                for j in base + k * p..base + (k + 1) * p {
                    let xhat = (x[j].to_f64() - mean) * inv;
                    dx.push(T::from_f64(inv * (dy[j].to_f64() * g - m1 - xhat * m2)));
                }
            }
        }
        dx.extend(dgamma.into_iter().map(T::from_f64));
        dx.extend(dbeta.into_iter().map(T::from_f64));
        Ok(dx)
    }
}

impl CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "group-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = self.check(l1, l2, l3)?;
        let out = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(self.forward::<f32>(slice(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?, dims)?),
            CpuStorage::F64(_) => CpuStorage::F64(self.forward::<f64>(slice(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?, dims)?),
            _ => candle_core::bail!("fused ops support f32 and f64 only"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let packed = x.apply_op3_no_bwd(gamma, &grad.contiguous()?, &GroupNormGrad(*self))?;
        let (n, c) = (x.elem_count(), gamma.elem_count());
        let dx = packed.narrow(0, 0, n)?.reshape(x.shape())?;
        let dgamma = packed.narrow(0, n, c)?;
        let dbeta = packed.narrow(0, n + c, c)?.reshape(beta.shape())?;
        Ok((Some(dx), Some(dgamma), Some(dbeta)))
    }
}

struct GroupNormGrad(GroupNormOp);

impl CustomOp3 for GroupNormGrad {
    fn name(&self) -> &'static str {
        "group-norm-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = self.0.check(l1, l2, l2)?;
        let len = l1.shape().elem_count() + 2 * dims.1;
        let out = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(self.0.backward::<f32>(slice(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?, dims)?),
            CpuStorage::F64(_) => CpuStorage::F64(self.0.backward::<f64>(slice(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?, dims)?),
            _ => candle_core::bail!("fused ops support f32 and f64 only"),
        };
        Ok((out, Shape::from(len)))
    }
}

/// Group normalization of `[B, C, ...]` with per-channel affine parameters.
pub fn group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize, eps: f64) -> candle_core::Result<Tensor> {
    x.contiguous()?
        .apply_op3(&gamma.contiguous()?, &beta.contiguous()?, GroupNormOp { groups, eps })
}

/// Window geometry of a 2x2, stride-2 pool over `[B, C, H, W]`.
fn pool_dims(l: &Layout) -> candle_core::Result<(usize, usize, usize, usize, usize)> {
    let &[b, c, h, w] = l.dims() else {
        candle_core::bail!("max pool expects [B, C, H, W], got {:?}", l.dims());
    };
    Ok((b * c, h, w, h / 2, w / 2))
}

/// Flat input index of the maximum of every window; ties go to the first element.
fn pool_argmax<T: WithDType>(x: &[T], (planes, h, w, ho, wo): (usize, usize, usize, usize, usize)) -> Vec<usize> {
    let mut idx = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let top = base + 2 * i * w + 2 * j;
                let best = [top, top + 1, top + w, top + w + 1]
                    .into_iter()
                    .reduce(|a, b| if x[b].to_f64() > x[a].to_f64() { b } else { a })
                    .expect("window is non-empty");
                idx.push(best);
            }
        }
    }
    idx
}

struct MaxPool2x2;

fn pool_fwd<T: WithDType>(s: &CpuStorage, l: &Layout) -> candle_core::Result<Vec<T>> {
    let x = slice::<T>(s, l)?;
    Ok(pool_argmax(x, pool_dims(l)?).into_iter().map(|i| x[i]).collect())
}

impl CustomOp1 for MaxPool2x2 {
    fn name(&self) -> &'static str {
        "max-pool-2x2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, _, _, ho, wo) = pool_dims(l)?;
        let dims = l.dims();
        let out = float_dispatch!(s, pool_fwd, s, l);
        Ok((out, Shape::from((dims[0], dims[1], ho, wo))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2(&grad.contiguous()?, MaxPoolGrad)?))
    }
}

/// Routes each window's output gradient to the input element that won the max.
struct MaxPoolGrad;

fn pool_bwd<T: WithDType>(s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<Vec<T>> {
    let (x, g) = (slice::<T>(s1, l1)?, slice::<T>(s2, l2)?);
    let mut dx = vec![T::zero(); x.len()];
    for (k, i) in pool_argmax(x, pool_dims(l1)?).into_iter().enumerate() {
        dx[i] = g[k];
    }
    Ok(dx)
}

impl CustomOp2 for MaxPoolGrad {
    fn name(&self) -> &'static str {
        "max-pool-2x2-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (planes, _, _, ho, wo) = pool_dims(l1)?;
        if l2.shape().elem_count() != planes * ho * wo {
            candle_core::bail!("max pool grad: {:?} does not match input {:?}", l2.dims(), l1.dims());
        }
        let out = float_dispatch!(s1, pool_bwd, s1, l1, s2, l2);
        Ok((out, l1.shape().clone()))
    }
}

/// 2x2 max pooling with stride 2; odd trailing rows and columns are dropped.
pub fn max_pool_2x2(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(MaxPool2x2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var, D};

    fn composed(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize) -> Tensor {
        let (b, c, h, w) = x.dims4().unwrap();
        let g = x.reshape((b, groups, (c / groups) * h * w)).unwrap();
        let mean = g.mean_keepdim(D::Minus1).unwrap();
        let centered = g.broadcast_sub(&mean).unwrap();
        let var = centered.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
        let normed = centered.broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap()).unwrap().reshape((b, c, h, w)).unwrap();
        normed
            .broadcast_mul(&gamma.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&beta.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn group_norm_matches_composed_ops() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0.5f64, 2.0, (2, 6, 5, 4), &dev).unwrap()).unwrap();
        let gamma = Var::from_tensor(&Tensor::randn(1.0f64, 0.3, 6, &dev).unwrap()).unwrap();
        let beta = Var::from_tensor(&Tensor::randn(0.0f64, 0.3, 6, &dev).unwrap()).unwrap();
        let weights = Tensor::randn(0.0f64, 1.0, (2, 6, 5, 4), &dev).unwrap();
        let fused = group_norm(&x, &gamma, &beta, 3, 1e-5).unwrap();
        let reference = composed(&x, &gamma, &beta, 3);
        assert!(max_diff(&fused, &reference) < 1e-12);
        let g1 = (fused * &weights).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (reference * &weights).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &gamma, &beta] {
            let d = max_diff(g1.get(v).unwrap(), g2.get(v).unwrap());
            assert!(d < 1e-10, "gradient differs by {d}");
        }
    }

    #[test]
    fn bias_matches_broadcast_add() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f32, 1.0, (3, 4, 3, 5), &dev).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::randn(0f32, 1.0, 4, &dev).unwrap()).unwrap();
        let w = Tensor::randn(0f32, 1.0, (3, 4, 3, 5), &dev).unwrap();
        let fused = add_channel_bias(&x, &b).unwrap();
        let reference = x.broadcast_add(&b.reshape((1, 4, 1, 1)).unwrap()).unwrap();
        let to64 = |t: &Tensor| t.to_dtype(DType::F64).unwrap();
        assert!(max_diff(&to64(&fused), &to64(&reference)) < 1e-6);
        let g1 = (fused * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (reference * &w).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(max_diff(&to64(g1.get(&b).unwrap()), &to64(g2.get(&b).unwrap())) < 1e-4);
    }

    #[test]
    fn max_pool_routes_gradient_to_the_winner() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, 6, 4), &dev).unwrap()).unwrap();
        let pooled = max_pool_2x2(&x).unwrap();
        assert_eq!(max_diff(&pooled, &x.max_pool2d(2).unwrap()), 0.0);

        let w = Tensor::randn(0f64, 1.0, (2, 3, 3, 2), &dev).unwrap();
        let grads = (pooled * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let dx: Vec<f64> = grads.get(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let xs: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        let ws: Vec<f64> = w.flatten_all().unwrap().to_vec1().unwrap();
        for (k, &wk) in ws.iter().enumerate() {
            let (plane, i, j) = (k / 6, k % 6 / 2, k % 2);
            let window: Vec<usize> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .map(|(di, dj)| plane * 24 + (2 * i + di) * 4 + 2 * j + dj)
                .collect();
            let winner = *window.iter().max_by(|&&a, &&b| xs[a].total_cmp(&xs[b])).unwrap();
            for idx in window {
                assert_eq!(dx[idx], if idx == winner { wk } else { 0.0 });
            }
        }
    }
}
