//! One-hot semantic masks. Masks are conditioning data, not parameters, so
//! they live outside the autodiff graph and enter it as constant leaves.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor};

/// C x H x W one-hot binary layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMask {
    channels: Vec<f32>,
    c: usize,
    h: usize,
    w: usize,
}

impl SemanticMask {
    /// Validates the one-hot invariant: values in {0,1}, per-pixel sum 1.
    pub fn new(channels: Vec<f32>, c: usize, h: usize, w: usize) -> Result<Self> {
        if channels.len() != c * h * w {
            return Err(Error::Dim(format!(
                "mask data length {} != {c}x{h}x{w}",
                channels.len()
            )));
        }
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0f32;
                for j in 0..c {
                    let v = channels[(j * h + y) * w + x];
                    if v != 0.0 && v != 1.0 {
                        return Err(Error::Data(format!(
                            "mask value {v} at channel {j}, pixel ({y},{x}) is not binary"
                        )));
                    }
                    sum += v;
                }
                if sum != 1.0 {
                    return Err(Error::Data(format!(
                        "mask pixel ({y},{x}) channel sum {sum} != 1 (not one-hot)"
                    )));
                }
            }
        }
        Ok(SemanticMask { channels, c, h, w })
    }

    /// Build from a per-pixel class-index map.
    pub fn from_indices(indices: &[u8], num_classes: usize, h: usize, w: usize) -> Result<Self> {
        if indices.len() != h * w {
            return Err(Error::Dim(format!(
                "index map length {} != {h}x{w}",
                indices.len()
            )));
        }
        let mut channels = vec![0.0f32; num_classes * h * w];
        for (p, &idx) in indices.iter().enumerate() {
            if idx as usize >= num_classes {
                return Err(Error::Data(format!(
                    "class index {idx} at pixel ({},{}) >= num_classes {num_classes}",
                    p / w,
                    p % w
                )));
            }
            channels[idx as usize * h * w + p] = 1.0;
        }
        Ok(SemanticMask {
            channels,
            c: num_classes,
            h,
            w,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.c
    }
    pub fn height(&self) -> usize {
        self.h
    }
    pub fn width(&self) -> usize {
        self.w
    }
    pub fn data(&self) -> &[f32] {
        &self.channels
    }
    pub fn channel(&self, j: usize) -> &[f32] {
        &self.channels[j * self.h * self.w..(j + 1) * self.h * self.w]
    }

    /// Per-pixel argmax class indices.
    pub fn to_indices(&self) -> Vec<u8> {
        let hw = self.h * self.w;
        let mut out = vec![0u8; hw];
        for p in 0..hw {
            for j in 0..self.c {
                if self.channels[j * hw + p] == 1.0 {
                    out[p] = j as u8;
                    break;
                }
            }
        }
        out
    }

    /// Number of active pixels per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let hw = self.h * self.w;
        (0..self.c)
            .map(|j| {
                self.channels[j * hw..(j + 1) * hw]
                    .iter()
                    .filter(|&&v| v == 1.0)
                    .count()
            })
            .collect()
    }

    /// Nearest-neighbor resize; output stays one-hot. Pixel centers are
    /// aligned: output pixel `d` reads source index `floor((d + 0.5) * src/dst)`.
    pub fn resize(&self, new_h: usize, new_w: usize) -> SemanticMask {
        assert!(new_h > 0 && new_w > 0, "resize target dims must be positive");
        if new_h == self.h && new_w == self.w {
            return self.clone();
        }
        let map = |d: usize, dst: usize, src: usize| -> usize {
            let pos = (d as f64 + 0.5) * src as f64 / dst as f64;
            (pos.floor() as usize).min(src - 1)
        };
        let mut channels = vec![0.0f32; self.c * new_h * new_w];
        for j in 0..self.c {
            let src = self.channel(j);
            for y in 0..new_h {
                let sy = map(y, new_h, self.h);
                for x in 0..new_w {
                    let sx = map(x, new_w, self.w);
                    channels[(j * new_h + y) * new_w + x] = src[sy * self.w + sx];
                }
            }
        }
        SemanticMask {
            channels,
            c: self.c,
            h: new_h,
            w: new_w,
        }
    }

    /// Constant graph leaf of shape [C, H, W].
    pub fn to_tensor<E: Scalar>(&self, g: &Graph<E>) -> Tensor<E> {
        let data: Vec<E> = self.channels.iter().map(|&v| E::from_f32(v)).collect();
        g.constant(data, &[self.c, self.h, self.w])
    }

    /// Constant graph leaf of shape [1, C, H, W].
    pub fn to_tensor_batched<E: Scalar>(&self, g: &Graph<E>) -> Tensor<E> {
        let data: Vec<E> = self.channels.iter().map(|&v| E::from_f32(v)).collect();
        g.constant(data, &[1, self.c, self.h, self.w])
    }
}

/// Stack masks into a constant [N, C, H, W] leaf.
pub fn masks_to_batch<E: Scalar>(g: &Graph<E>, masks: &[&SemanticMask]) -> Tensor<E> {
    let (c, h, w) = (
        masks[0].num_classes(),
        masks[0].height(),
        masks[0].width(),
    );
    let mut data = Vec::with_capacity(masks.len() * c * h * w);
    for m in masks {
        assert_eq!((m.num_classes(), m.height(), m.width()), (c, h, w));
        data.extend(m.data().iter().map(|&v| E::from_f32(v)));
    }
    g.constant(data, &[masks.len(), c, h, w])
}
