use nodet_tensor::{AxisWindows, Graph, PoolPlan, Tensor, Var};

use crate::error::{ensure, Result};
use crate::Scalar;

/// Window sizes for one halving step of an axis of length `n`: small windows
/// at the center, size-3 windows at the periphery.
///
/// Starts from `n/2` windows of size 2, then for each mirrored pair of sides
/// repeatedly shrinks the innermost window larger than 1 to 1 while growing
/// the outermost window smaller than 3 to 3.
pub fn central_pool_schedule(n: usize) -> Result<Vec<usize>> {
    ensure(n >= 4 && n.is_multiple_of(2), || format!("central pooling needs an even axis >= 4, got {n}"))?;
    let k = n / 2;
    let half = k / 2;
    let mut left = vec![2usize; half];
    loop {
        let inner = (0..half).rev().find(|&i| left[i] > 1);
        let outer = (0..half).find(|&i| left[i] < 3);
        match (inner, outer) {
            (Some(i), Some(o)) if o < i => {
                left[i] -= 1;
                left[o] += 1;
            }
            _ => break,
        }
    }
    let mut sizes = left.clone();
    if k % 2 == 1 {
        sizes.push(2);
    }
    sizes.extend(left.iter().rev());
    Ok(sizes)
}

/// Start of the central `n/2` block.
pub fn central_crop_start(n: usize) -> usize {
    (n - n / 2) / 2
}

/// Pool plan plus crop block for one dual-pool step on `dims`. Cubic even
/// grids halve on every axis; `[1, n, n]` maps halve in-plane only.
pub fn dual_pool_plan(dims: [usize; 3]) -> Result<(PoolPlan, [usize; 3], [usize; 3])> {
    let [d, h, w] = dims;
    let planar = d == 1 && h == w;
    ensure((d == h && h == w) || planar, || format!("dual pooling needs a cube or a square map, got {dims:?}"))?;
    ensure(h % 2 == 0 && h >= 4, || format!("dual pooling needs even sides >= 4, got {dims:?}"))?;
    let axis = |n: usize| -> Result<AxisWindows> { Ok(AxisWindows::from_sizes(&central_pool_schedule(n)?)?) };
    let dz = if planar { AxisWindows::identity(1) } else { axis(d)? };
    let plan = PoolPlan::new(dz, axis(h)?, axis(w)?);
    let (s, c) = (central_crop_start(h), h / 2);
    let (start, size) = if planar { ([0, s, s], [1, c, c]) } else { ([s; 3], [c; 3]) };
    Ok((plan, start, size))
}

/// Central pooling and central cropping concatenated on channels:
/// `[n, c, s, s, s] -> [n, 2c, s/2, s/2, s/2]`.
pub fn dual_pool<T: Scalar>(g: &Graph<T>, x: &Var<T>) -> Result<Var<T>> {
    let (plan, start, size) = dual_pool_plan(x.shape().dims())?;
    let pooled = g.max_pool(x, &plan)?;
    let crop = g.crop(x, start, size)?;
    Ok(g.concat(&[&pooled, &crop])?)
}

/// Inference-only convenience.
pub fn dual_pool_tensor<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let g = Graph::inference();
    let v = g.constant(x.clone());
    Ok(dual_pool(&g, &v)?.into_tensor())
}
