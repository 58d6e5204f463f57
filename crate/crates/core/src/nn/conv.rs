use super::{he_bound, Grads, Parameterized, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::volumes::Dims3;

/// Channel-major activation volume laid out as `[c][z][y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub dims: Dims3,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, dims: Dims3) -> Self {
        FeatureMap {
            channels,
            dims,
            data: vec![0.0; channels * dims.len()],
        }
    }

    pub fn from_f32(dims: Dims3, voxels: &[f32]) -> Self {
        FeatureMap {
            channels: 1,
            dims,
            data: voxels.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.dims.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.dims.len();
        &mut self.data[c * n..(c + 1) * n]
    }
}

/// Same-padded, stride-1 3D convolution with cubic kernels of size 1 or 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    /// `[out, in, k, k, k]`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// Output-coordinate range for which `c + d` stays inside `[0, n)`.
fn valid(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo, hi.max(lo))
}

impl Conv3d {
    pub fn new(input: usize, output: usize, k: usize, bias: bool, rng: &mut Rng) -> Result<Self> {
        if k != 1 && k != 3 {
            return Err(Error::config(format!("kernel size {k} not supported (1 or 3)")));
        }
        let fan_in = input * k * k * k;
        Ok(Conv3d {
            weight: Tensor::uniform(&[output, input, k, k, k], he_bound(fan_in), rng),
            bias: bias.then(|| Tensor::zeros(&[output])),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape[2]
    }

    fn check_input(&self, x: &FeatureMap) -> Result<()> {
        if x.channels != self.in_channels() {
            return Err(Error::dimension(format!(
                "convolution expects {} input channels, got {}",
                self.in_channels(),
                x.channels
            )));
        }
        Ok(())
    }

    /// Calls `f(o, i, weight_index, dz, dy, dx)` for every kernel tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, isize, isize, isize)) {
        let k = self.kernel();
        let p = (k / 2) as isize;
        let mut w = 0;
        for o in 0..self.out_channels() {
            for i in 0..self.in_channels() {
                for dz in -p..=p {
                    for dy in -p..=p {
                        for dx in -p..=p {
                            f(o, i, w, dz, dy, dx);
                            w += 1;
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        self.check_input(x)?;
        let d = x.dims;
        let n = d.len();
        let mut out = FeatureMap::zeros(self.out_channels(), d);
        if let Some(b) = &self.bias {
            for (o, &bv) in b.data.iter().enumerate() {
                out.channel_mut(o).iter_mut().for_each(|v| *v = bv);
            }
        }
        self.for_each_tap(|o, i, w, dz, dy, dx| {
            let wv = self.weight.data[w];
            if wv == 0.0 {
                return;
            }
            let (z0, z1) = valid(d.z, dz);
            let (y0, y1) = valid(d.y, dy);
            let (x0, x1) = valid(d.x, dx);
            let src = &x.data[i * n..(i + 1) * n];
            let dst = &mut out.data[o * n..(o + 1) * n];
            for z in z0..z1 {
                let sz = (z as isize + dz) as usize;
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let drow = (z * d.y + y) * d.x;
                    let srow = (sz * d.y + sy) * d.x;
                    let sx0 = (x0 as isize + dx) as usize;
                    let dst_row = &mut dst[drow + x0..drow + x1];
                    let src_row = &src[srow + sx0..srow + sx0 + (x1 - x0)];
                    for (a, b) in dst_row.iter_mut().zip(src_row) {
                        *a += wv * b;
                    }
                }
            }
        });
        Ok(out)
    }

    /// Accumulates weight/bias gradients under `prefix` and returns `dL/dx`.
    pub fn backward(
        &self,
        x: &FeatureMap,
        gy: &FeatureMap,
        grads: &mut Grads,
        prefix: &str,
        need_input_grad: bool,
    ) -> FeatureMap {
        let d = x.dims;
        let n = d.len();
        let mut gw = vec![0.0; self.weight.len()];
        let mut gx = FeatureMap::zeros(if need_input_grad { x.channels } else { 0 }, d);
        self.for_each_tap(|o, i, w, dz, dy, dx| {
            let (z0, z1) = valid(d.z, dz);
            let (y0, y1) = valid(d.y, dy);
            let (x0, x1) = valid(d.x, dx);
            let src = &x.data[i * n..(i + 1) * n];
            let g = &gy.data[o * n..(o + 1) * n];
            let wv = self.weight.data[w];
            let mut acc = 0.0;
            for z in z0..z1 {
                let sz = (z as isize + dz) as usize;
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let grow = (z * d.y + y) * d.x;
                    let srow = (sz * d.y + sy) * d.x;
                    let sx0 = (x0 as isize + dx) as usize;
                    let g_row = &g[grow + x0..grow + x1];
                    let s_row = &src[srow + sx0..srow + sx0 + (x1 - x0)];
                    acc += g_row.iter().zip(s_row).map(|(a, b)| a * b).sum::<f64>();
                    if need_input_grad && wv != 0.0 {
                        let gx_row =
                            &mut gx.data[i * n + srow + sx0..i * n + srow + sx0 + (x1 - x0)];
                        for (a, b) in gx_row.iter_mut().zip(g_row) {
                            *a += wv * b;
                        }
                    }
                }
            }
            gw[w] += acc;
        });
        grads.accumulate(&format!("{prefix}.weight"), &gw);
        if self.bias.is_some() {
            let gb: Vec<f64> = (0..self.out_channels())
                .map(|o| gy.channel(o).iter().sum())
                .collect();
            grads.accumulate(&format!("{prefix}.bias"), &gb);
        }
        gx
    }
}

impl Parameterized for Conv3d {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("weight".to_string(), &self.weight)];
        if let Some(b) = &self.bias {
            v.push(("bias".into(), b));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = vec![("weight".to_string(), &mut self.weight)];
        if let Some(b) = &mut self.bias {
            v.push(("bias".into(), b));
        }
        v
    }
}

pub fn relu_inplace(x: &mut FeatureMap) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `g` wherever the rectified activation `y` is not positive.
pub fn relu_backward_inplace(g: &mut FeatureMap, y: &FeatureMap) {
    for (gv, &yv) in g.data.iter_mut().zip(&y.data) {
        if yv <= 0.0 {
            *gv = 0.0;
        }
    }
}

fn halve(d: Dims3) -> Result<Dims3> {
    if d.z % 2 != 0 || d.y % 2 != 0 || d.x % 2 != 0 {
        return Err(Error::dimension(format!("cannot pool odd dims {d}")));
    }
    Ok(Dims3::new(d.z / 2, d.y / 2, d.x / 2))
}

/// 2x2x2 average pooling.
pub fn avg_pool2(x: &FeatureMap) -> Result<FeatureMap> {
    let h = halve(x.dims)?;
    let d = x.dims;
    let mut out = FeatureMap::zeros(x.channels, h);
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for z in 0..d.z {
            for y in 0..d.y {
                let row = (z * d.y + y) * d.x;
                let orow = ((z / 2) * h.y + y / 2) * h.x;
                for xx in 0..d.x {
                    dst[orow + xx / 2] += src[row + xx] * 0.125;
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2_backward(g: &FeatureMap, input_dims: Dims3) -> FeatureMap {
    let d = input_dims;
    let h = g.dims;
    let mut out = FeatureMap::zeros(g.channels, d);
    for c in 0..g.channels {
        let src = g.channel(c);
        let dst = out.channel_mut(c);
        for z in 0..d.z {
            for y in 0..d.y {
                let row = (z * d.y + y) * d.x;
                let orow = ((z / 2) * h.y + y / 2) * h.x;
                for xx in 0..d.x {
                    dst[row + xx] = src[orow + xx / 2] * 0.125;
                }
            }
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &FeatureMap) -> FeatureMap {
    let h = x.dims;
    let d = Dims3::new(h.z * 2, h.y * 2, h.x * 2);
    let mut out = FeatureMap::zeros(x.channels, d);
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for z in 0..d.z {
            for y in 0..d.y {
                let row = (z * d.y + y) * d.x;
                let srow = ((z / 2) * h.y + y / 2) * h.x;
                for xx in 0..d.x {
                    dst[row + xx] = src[srow + xx / 2];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward(g: &FeatureMap) -> FeatureMap {
    let d = g.dims;
    let h = Dims3::new(d.z / 2, d.y / 2, d.x / 2);
    let mut out = FeatureMap::zeros(g.channels, h);
    for c in 0..g.channels {
        let src = g.channel(c);
        let dst = out.channel_mut(c);
        for z in 0..d.z {
            for y in 0..d.y {
                let row = (z * d.y + y) * d.x;
                let orow = ((z / 2) * h.y + y / 2) * h.x;
                for xx in 0..d.x {
                    dst[orow + xx / 2] += src[row + xx];
                }
            }
        }
    }
    out
}

pub fn concat_channels(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    if a.dims != b.dims {
        return Err(Error::dimension(format!(
            "cannot concatenate maps of dims {} and {}",
            a.dims, b.dims
        )));
    }
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Ok(FeatureMap {
        channels: a.channels + b.channels,
        dims: a.dims,
        data,
    })
}

/// Inverse of [`concat_channels`]: the first `first` channels and the rest.
pub fn split_channels(g: &FeatureMap, first: usize) -> (FeatureMap, FeatureMap) {
    let cut = first * g.dims.len();
    (
        FeatureMap {
            channels: first,
            dims: g.dims,
            data: g.data[..cut].to_vec(),
        },
        FeatureMap {
            channels: g.channels - first,
            dims: g.dims,
            data: g.data[cut..].to_vec(),
        },
    )
}

pub fn global_avg_pool(x: &FeatureMap) -> Vec<f64> {
    let n = x.dims.len() as f64;
    (0..x.channels)
        .map(|c| x.channel(c).iter().sum::<f64>() / n)
        .collect()
}

pub fn global_avg_pool_backward(g: &[f64], dims: Dims3) -> FeatureMap {
    let n = dims.len();
    let mut out = FeatureMap::zeros(g.len(), dims);
    for (c, &gv) in g.iter().enumerate() {
        let v = gv / n as f64;
        out.data[c * n..(c + 1) * n].iter_mut().for_each(|x| *x = v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    fn random_map(c: usize, d: Dims3, seed: u64) -> FeatureMap {
        let mut rng = seeded(seed);
        FeatureMap {
            channels: c,
            dims: d,
            data: (0..c * d.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    /// Direct zero-padded definition, independent of the row-loop kernel.
    fn naive_conv(conv: &Conv3d, x: &FeatureMap) -> FeatureMap {
        let d = x.dims;
        let k = conv.kernel() as isize;
        let p = k / 2;
        let mut out = FeatureMap::zeros(conv.out_channels(), d);
        for o in 0..conv.out_channels() {
            for z in 0..d.z as isize {
                for y in 0..d.y as isize {
                    for xx in 0..d.x as isize {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.data[o]);
                        for i in 0..conv.in_channels() {
                            for a in 0..k {
                                for b in 0..k {
                                    for c in 0..k {
                                        let (sz, sy, sx) = (z + a - p, y + b - p, xx + c - p);
                                        if sz < 0
                                            || sy < 0
                                            || sx < 0
                                            || sz >= d.z as isize
                                            || sy >= d.y as isize
                                            || sx >= d.x as isize
                                        {
                                            continue;
                                        }
                                        let w = conv.weight.data[((((o * conv.in_channels()) + i)
                                            * k as usize
                                            + a as usize)
                                            * k as usize
                                            + b as usize)
                                            * k as usize
                                            + c as usize];
                                        acc += w * x.channel(i)
                                            [d.index(sz as usize, sy as usize, sx as usize)];
                                    }
                                }
                            }
                        }
                        out.channel_mut(o)[d.index(z as usize, y as usize, xx as usize)] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_definition() {
        let mut rng = seeded(3);
        let d = Dims3::new(3, 4, 5);
        for k in [1, 3] {
            let mut conv = Conv3d::new(2, 3, k, true, &mut rng).unwrap();
            conv.bias.as_mut().unwrap().data = vec![0.1, -0.2, 0.3];
            let x = random_map(2, d, 8);
            let fast = conv.forward(&x).unwrap();
            let slow = naive_conv(&conv, &x);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), g> is linear in x and w, so exact gradients follow from the adjoint identity.
        let mut rng = seeded(5);
        let d = Dims3::new(4, 3, 5);
        let conv = Conv3d::new(2, 2, 3, false, &mut rng).unwrap();
        let x = random_map(2, d, 1);
        let g = random_map(2, d, 2);
        let mut grads = Grads::new();
        let gx = conv.backward(&x, &g, &mut grads, "c", true);
        let y = conv.forward(&x).unwrap();
        let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let via_x: f64 = gx.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        let via_w: f64 = grads
            .get("c.weight")
            .unwrap()
            .iter()
            .zip(&conv.weight.data)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
    }

    #[test]
    fn pool_and_upsample_are_adjoint_up_to_scale() {
        let d = Dims3::new(4, 4, 2);
        let x = random_map(2, d, 4);
        let pooled = avg_pool2(&x).unwrap();
        let g = random_map(2, pooled.dims, 9);
        let back = avg_pool2_backward(&g, d);
        let lhs: f64 = pooled.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = back.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let up = upsample2(&g);
        let gu = random_map(2, up.dims, 10);
        let lhs: f64 = up.data.iter().zip(&gu.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = upsample2_backward(&gu)
            .data
            .iter()
            .zip(&g.data)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn odd_dims_cannot_pool() {
        assert!(avg_pool2(&FeatureMap::zeros(1, Dims3::new(3, 4, 4))).is_err());
    }
}
