//! Separable window max-pooling, cropping and global average pooling.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Pooling windows along one axis, as `(start, len)` pairs over `0..extent`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AxisWindows {
    extent: usize,
    windows: Vec<(usize, usize)>,
}

impl AxisWindows {
    pub fn new(extent: usize, windows: Vec<(usize, usize)>) -> Result<Self> {
        for &(s, l) in &windows {
            if l == 0 || s + l > extent {
                return Err(Error::Geometry(format!("window ({s}, {l}) outside axis of {extent}")));
            }
        }
        if windows.is_empty() {
            return Err(Error::Geometry("no pooling windows".into()));
        }
        Ok(AxisWindows { extent, windows })
    }

    /// One window per index: the axis passes through untouched.
    pub fn identity(extent: usize) -> Self {
        AxisWindows { extent, windows: (0..extent).map(|i| (i, 1)).collect() }
    }

    /// Contiguous windows of the given sizes, laid end to end.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        let mut start = 0;
        let mut windows = Vec::with_capacity(sizes.len());
        for &s in sizes {
            windows.push((start, s));
            start += s;
        }
        Self::new(start, windows)
    }

    /// Windows of `size` every `stride` with "same" padding
    /// (`ceil(extent / stride)` outputs, surplus padding after the data),
    /// clipped to the axis.
    pub fn strided_same(extent: usize, size: usize, stride: usize) -> Self {
        let out = extent.div_ceil(stride);
        let total = ((out - 1) * stride + size).saturating_sub(extent);
        let pad = (total / 2) as isize;
        let windows = (0..out)
            .map(|o| {
                let lo = (o * stride) as isize - pad;
                let hi = (lo + size as isize).min(extent as isize);
                let lo = lo.max(0);
                (lo as usize, (hi - lo) as usize)
            })
            .collect();
        AxisWindows { extent, windows }
    }

    pub fn extent(&self) -> usize {
        self.extent
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn windows(&self) -> &[(usize, usize)] {
        &self.windows
    }
}

/// Windows for the three spatial axes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolPlan {
    pub axes: [AxisWindows; 3],
}

impl PoolPlan {
    pub fn new(d: AxisWindows, h: AxisWindows, w: AxisWindows) -> Self {
        PoolPlan { axes: [d, h, w] }
    }

    pub fn input_dims(&self) -> [usize; 3] {
        [self.axes[0].extent, self.axes[1].extent, self.axes[2].extent]
    }

    pub fn output_dims(&self) -> [usize; 3] {
        [self.axes[0].len(), self.axes[1].len(), self.axes[2].len()]
    }
}

/// Max over each window cell; returns the output and, per output element, the
/// flat in-channel offset of the winning input.
pub fn max_pool_forward<T: Scalar>(x: &Tensor<T>, plan: &PoolPlan) -> (Tensor<T>, Vec<u32>) {
    let xs = x.shape();
    let [od, oh, ow] = plan.output_dims();
    let ys = Shape::new(xs.n, xs.c, od, oh, ow);
    let mut y = Tensor::zeros(ys);
    let mut arg = vec![0u32; ys.numel()];
    let in_sp = xs.spatial();
    let out_sp = ys.spatial();
    let [wd, wh, ww] = [plan.axes[0].windows(), plan.axes[1].windows(), plan.axes[2].windows()];
    for nc in 0..xs.n * xs.c {
        let xin = &x.data()[nc * in_sp..(nc + 1) * in_sp];
        let yout = &mut y.data_mut()[nc * out_sp..(nc + 1) * out_sp];
        let aout = &mut arg[nc * out_sp..(nc + 1) * out_sp];
        let mut o = 0;
        for &(zs, zl) in wd {
            for &(ys_, yl) in wh {
                for &(xs_, xl) in ww {
                    let mut best_i = (zs * xs.h + ys_) * xs.w + xs_;
                    let mut best = xin[best_i];
                    for z in zs..zs + zl {
                        for yy in ys_..ys_ + yl {
                            let row = (z * xs.h + yy) * xs.w;
                            for xx in xs_..xs_ + xl {
                                let v = xin[row + xx];
                                if v > best {
                                    best = v;
                                    best_i = row + xx;
                                }
                            }
                        }
                    }
                    yout[o] = best;
                    aout[o] = best_i as u32;
                    o += 1;
                }
            }
        }
    }
    (y, arg)
}

/// Copy of the block `start..start + size` on each spatial axis.
pub fn crop_forward<T: Scalar>(x: &Tensor<T>, start: [usize; 3], size: [usize; 3]) -> Tensor<T> {
    let xs = x.shape();
    let ys = xs.with_dims(size);
    let mut y = Tensor::zeros(ys);
    for n in 0..xs.n {
        for c in 0..xs.c {
            for z in 0..size[0] {
                for yy in 0..size[1] {
                    let src = xs.offset(n, c, start[0] + z, start[1] + yy, start[2]);
                    let dst = ys.offset(n, c, z, yy, 0);
                    y.data_mut()[dst..dst + size[2]].copy_from_slice(&x.data()[src..src + size[2]]);
                }
            }
        }
    }
    y
}

impl<T: Scalar> Graph<T> {
    pub fn max_pool(&self, x: &Var<T>, plan: &PoolPlan) -> Result<Var<T>> {
        let xs = x.shape();
        if xs.dims() != plan.input_dims() {
            return Err(Error::ShapeMismatch(format!("pool plan for {:?} applied to {xs}", plan.input_dims())));
        }
        let (y, arg) = max_pool_forward(x.value(), plan);
        let in_sp = xs.spatial();
        let out_sp = y.shape().spatial();
        Ok(self.record(y, &[x], move |dy, _| {
            let mut dx = Tensor::zeros(xs);
            for nc in 0..xs.n * xs.c {
                let dxc = &mut dx.data_mut()[nc * in_sp..(nc + 1) * in_sp];
                for o in 0..out_sp {
                    dxc[arg[nc * out_sp + o] as usize] += dy.data()[nc * out_sp + o];
                }
            }
            vec![Some(dx)]
        }))
    }

    pub fn crop(&self, x: &Var<T>, start: [usize; 3], size: [usize; 3]) -> Result<Var<T>> {
        let xs = x.shape();
        for a in 0..3 {
            if size[a] == 0 || start[a] + size[a] > xs.dims()[a] {
                return Err(Error::Geometry(format!("crop {start:?}+{size:?} outside {xs}")));
            }
        }
        let y = crop_forward(x.value(), start, size);
        Ok(self.record(y, &[x], move |dy, _| {
            let mut dx = Tensor::zeros(xs);
            let ys = dy.shape();
            for n in 0..xs.n {
                for c in 0..xs.c {
                    for z in 0..size[0] {
                        for yy in 0..size[1] {
                            let dst = xs.offset(n, c, start[0] + z, start[1] + yy, start[2]);
                            let src = ys.offset(n, c, z, yy, 0);
                            dx.data_mut()[dst..dst + size[2]].copy_from_slice(&dy.data()[src..src + size[2]]);
                        }
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Mean over the spatial axes: `[n, c, d, h, w] -> [n, c, 1, 1, 1]`.
    pub fn global_avg_pool(&self, x: &Var<T>) -> Var<T> {
        let xs = x.shape();
        let sp = xs.spatial();
        let inv = T::one() / T::lit(sp as f64);
        let data: Vec<T> = x.value().data().chunks(sp).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        let y = Tensor::from_vec(Shape::vector(xs.n, xs.c), data).expect("pooled length");
        self.record(y, &[x], move |dy, _| {
            let mut dx = Tensor::zeros(xs);
            for (ch, &g) in dx.data_mut().chunks_mut(sp).zip(dy.data()) {
                ch.fill(g * inv);
            }
            vec![Some(dx)]
        })
    }
}
