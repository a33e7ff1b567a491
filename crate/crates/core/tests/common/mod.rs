//! Naive reference implementations and random instance generators shared
//! by the oracle, property and acceptance tests.
#![allow(dead_code)]

use mcfa::data::BoundingBox;
use mcfa::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[derive(Debug, Clone)]
pub struct ConvCase {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub x: Vec<f64>,
    pub k: Vec<f64>,
    pub b: Vec<f64>,
}

impl ConvCase {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let (c, h, w, o) = (
            rng.random_range(1..=3),
            rng.random_range(1..=7),
            rng.random_range(1..=7),
            rng.random_range(1..=3),
        );
        let pad = rng.random_range(0..=1);
        let kh = rng.random_range(1..=3.min(h + 2 * pad));
        let kw = rng.random_range(1..=3.min(w + 2 * pad));
        let stride = rng.random_range(1..=2);
        ConvCase {
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            x: randn(rng, c * h * w),
            k: randn(rng, o * c * kh * kw),
            b: randn(rng, o),
        }
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.kh) / self.stride + 1,
            (self.w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    /// Direct six-loop cross-correlation with explicit zero padding.
    pub fn reference(&self, x: &[f64], k: &[f64], b: &[f64]) -> Vec<f64> {
        let (oh, ow) = self.out_hw();
        let mut out = vec![0.0; self.o * oh * ow];
        for o in 0..self.o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b[o];
                    for c in 0..self.c {
                        for u in 0..self.kh {
                            for v in 0..self.kw {
                                let y = (i * self.stride + u) as isize - self.pad as isize;
                                let xx = (j * self.stride + v) as isize - self.pad as isize;
                                if y < 0 || xx < 0 || y >= self.h as isize || xx >= self.w as isize {
                                    continue;
                                }
                                acc += x[(c * self.h + y as usize) * self.w + xx as usize]
                                    * k[((o * self.c + c) * self.kh + u) * self.kw + v];
                            }
                        }
                    }
                    out[(o * oh + i) * ow + j] = acc;
                }
            }
        }
        out
    }

    pub fn engine(&self) -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![self.c, self.h, self.w], self.x.clone()).unwrap());
        let k = g.constant(Tensor::new(vec![self.o, self.c, self.kh, self.kw], self.k.clone()).unwrap());
        let b = g.constant(Tensor::vector(self.b.clone()));
        let y = g.conv2d(x, k, b, self.stride, self.pad).unwrap();
        g.value(y).to_vec()
    }
}

#[derive(Debug, Clone)]
pub struct PoolCase {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub stride: usize,
    pub x: Vec<f64>,
}

impl PoolCase {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let (c, h, w) = (
            rng.random_range(1..=3),
            rng.random_range(1..=8),
            rng.random_range(1..=8),
        );
        let window = rng.random_range(1..=h.min(w).min(3));
        PoolCase {
            c,
            h,
            w,
            window,
            stride: rng.random_range(1..=2),
            x: randn(rng, c * h * w),
        }
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h - self.window) / self.stride + 1,
            (self.w - self.window) / self.stride + 1,
        )
    }

    fn windows(&self, x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let (oh, ow) = self.out_hw();
        let mut out = Vec::with_capacity(self.c * oh * ow);
        for c in 0..self.c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut vals = Vec::new();
                    for u in 0..self.window {
                        for v in 0..self.window {
                            vals.push(x[(c * self.h + i * self.stride + u) * self.w + j * self.stride + v]);
                        }
                    }
                    out.push(f(&vals));
                }
            }
        }
        out
    }

    pub fn avg_reference(&self, x: &[f64]) -> Vec<f64> {
        self.windows(x, |v| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn max_reference(&self, x: &[f64]) -> Vec<f64> {
        self.windows(x, |v| v.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }

    pub fn engine(&self, max: bool) -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![self.c, self.h, self.w], self.x.clone()).unwrap());
        let y = if max {
            g.max_pool2d(x, self.window, self.stride)
        } else {
            g.avg_pool2d(x, self.window, self.stride)
        }
        .unwrap();
        g.value(y).to_vec()
    }
}

#[derive(Debug, Clone)]
pub struct FcCase {
    pub d_in: usize,
    pub d_out: usize,
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl FcCase {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let (d_in, d_out) = (rng.random_range(1..=12), rng.random_range(1..=12));
        FcCase {
            d_in,
            d_out,
            x: randn(rng, d_in),
            w: randn(rng, d_in * d_out),
            b: randn(rng, d_out),
        }
    }

    pub fn reference(&self, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        (0..self.d_out)
            .map(|j| b[j] + (0..self.d_in).map(|i| x[i] * w[i * self.d_out + j]).sum::<f64>())
            .collect()
    }

    pub fn engine(&self) -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(self.x.clone()));
        let w = g.constant(Tensor::new(vec![self.d_in, self.d_out], self.w.clone()).unwrap());
        let b = g.constant(Tensor::vector(self.b.clone()));
        let y = g.fully_connected(x, w, b).unwrap();
        g.value(y).to_vec()
    }
}

/// Row-wise softmax straight from the definition, no max shift.
pub fn softmax_reference(x: &[f64], row: usize) -> Vec<f64> {
    x.chunks(row)
        .flat_map(|r| {
            let z: f64 = r.iter().map(|v| v.exp()).sum();
            r.iter().map(move |v| v.exp() / z)
        })
        .collect()
}

pub fn softmax_engine(x: &[f64], rows: usize, row: usize) -> Vec<f64> {
    let mut g = Graph::new();
    let v = g.constant(Tensor::new(vec![rows, row], x.to_vec()).unwrap());
    let y = g.softmax(v).unwrap();
    g.value(y).to_vec()
}

/// Cell size of the IoU raster; box coordinates are drawn on this grid so
/// counting cells is exact.
pub const RASTER: f64 = 0.25;
pub const RASTER_CELLS: usize = 48;

pub fn grid_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let n = RASTER_CELLS as u32;
    let left = rng.random_range(0..n - 1);
    let top = rng.random_range(0..n - 1);
    let width = rng.random_range(0..=n - left);
    let height = rng.random_range(0..=n - top);
    BoundingBox::new(
        left as f64 * RASTER,
        top as f64 * RASTER,
        height as f64 * RASTER,
        width as f64 * RASTER,
    )
}

/// IoU by counting covered raster cells.
pub fn raster_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let covers = |bx: &BoundingBox, x: usize, y: usize| {
        let (cx, cy) = ((x as f64 + 0.5) * RASTER, (y as f64 + 0.5) * RASTER);
        cx > bx.left && cx < bx.left + bx.width && cy > bx.top && cy < bx.top + bx.height
    };
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..RASTER_CELLS {
        for x in 0..RASTER_CELLS {
            let (ia, ib) = (covers(a, x, y), covers(b, x, y));
            inter += usize::from(ia && ib);
            union += usize::from(ia || ib);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let a = f(&p);
            p[i] = x[i] - h;
            let b = f(&p);
            p[i] = x[i];
            (a - b) / (2.0 * h)
        })
        .collect()
}
