//! Dataset persistence and batch assembly.
//!
//! A dataset is a directory holding a `meta` text file (sizes, seeds,
//! normalization statistics), an `images` tensor (f32, [S, T, 1, H, W]) and
//! a `masks` tensor (u8, [S, T, 3, H, W]), both in the binary tensor format.
//! The first `train_stacks` stacks are the training split; the rest are the
//! test split.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::lorck1;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub stacks: usize,
    pub train_stacks: usize,
    pub seq_len: usize,
    pub size: usize,
    pub seed: u64,
    pub preset: String,
    /// Intensity statistics over all images, applied at batch time.
    pub mean: f64,
    pub std: f64,
}

impl DatasetMeta {
    fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "stacks = {}", self.stacks);
        let _ = writeln!(s, "train_stacks = {}", self.train_stacks);
        let _ = writeln!(s, "seq_len = {}", self.seq_len);
        let _ = writeln!(s, "size = {}", self.size);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "preset = {}", self.preset);
        let _ = writeln!(s, "mean = {}", self.mean);
        let _ = writeln!(s, "std = {}", self.std);
        s
    }

    fn from_text(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("bad meta line `{}`", line)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<String> {
            kv.get(k).cloned().ok_or_else(|| Error::Data(format!("meta key `{}` missing", k)))
        };
        Ok(DatasetMeta {
            stacks: get("stacks")?.parse().map_err(|_| Error::Data("stacks".into()))?,
            train_stacks: get("train_stacks")?.parse().map_err(|_| Error::Data("train_stacks".into()))?,
            seq_len: get("seq_len")?.parse().map_err(|_| Error::Data("seq_len".into()))?,
            size: get("size")?.parse().map_err(|_| Error::Data("size".into()))?,
            seed: get("seed")?.parse().map_err(|_| Error::Data("seed".into()))?,
            preset: get("preset")?,
            mean: get("mean")?.parse().map_err(|_| Error::Data("mean".into()))?,
            std: get("std")?.parse().map_err(|_| Error::Data("std".into()))?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{}`", other))),
        }
    }
}

/// In-memory dataset; images stay raw, normalization happens in the batch
/// builders using the stored statistics.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    images: Tensor<f32>,
    masks_shape: Vec<usize>,
    masks: Vec<u8>,
}

impl Dataset {
    pub fn new(meta: DatasetMeta, images: Tensor<f32>, masks_shape: Vec<usize>, masks: Vec<u8>) -> Result<Self> {
        let expect_img = [meta.stacks, meta.seq_len, 1, meta.size, meta.size];
        if images.shape() != expect_img {
            return Err(Error::Data(format!(
                "images shape {:?} does not match meta {:?}",
                images.shape(),
                expect_img
            )));
        }
        let expect_mask = vec![meta.stacks, meta.seq_len, 3, meta.size, meta.size];
        if masks_shape != expect_mask || masks.len() != expect_mask.iter().product::<usize>() {
            return Err(Error::Data(format!(
                "masks shape {:?} does not match meta {:?}",
                masks_shape, expect_mask
            )));
        }
        if meta.train_stacks == 0 || meta.train_stacks >= meta.stacks {
            return Err(Error::Data("train split must leave at least one test stack".into()));
        }
        Ok(Dataset { meta, images, masks_shape, masks })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("meta"), self.meta.to_text())?;
        lorck1::write_tensor(dir.join("images"), &self.images)?;
        lorck1::write_u8(dir.join("masks"), &self.masks_shape, &self.masks)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_text = std::fs::read_to_string(dir.join("meta"))
            .map_err(|e| Error::Data(format!("cannot read {}/meta: {}", dir.display(), e)))?;
        let meta = DatasetMeta::from_text(&meta_text)?;
        let images = lorck1::read_tensor::<f32>(dir.join("images"))?;
        let (masks_shape, masks) = lorck1::read_u8(dir.join("masks"))?;
        Dataset::new(meta, images, masks_shape, masks)
    }

    pub fn stack_ids(&self, split: Split) -> Vec<usize> {
        match split {
            Split::Train => (0..self.meta.train_stacks).collect(),
            Split::Test => (self.meta.train_stacks..self.meta.stacks).collect(),
        }
    }

    /// All (stack, slice) pairs of a split, for spatial sampling.
    pub fn slice_ids(&self, split: Split) -> Vec<(usize, usize)> {
        self.stack_ids(split)
            .into_iter()
            .flat_map(|s| (0..self.meta.seq_len).map(move |t| (s, t)))
            .collect()
    }

    fn image_plane(&self, stack: usize, slice: usize) -> &[f32] {
        let hw = self.meta.size * self.meta.size;
        let at = (stack * self.meta.seq_len + slice) * hw;
        &self.images.data()[at..at + hw]
    }

    fn mask_planes(&self, stack: usize, slice: usize) -> &[u8] {
        let hw = self.meta.size * self.meta.size;
        let at = (stack * self.meta.seq_len + slice) * 3 * hw;
        &self.masks[at..at + 3 * hw]
    }

    fn normalize(&self, v: f32) -> f64 {
        (v as f64 - self.meta.mean) / self.meta.std
    }

    /// Normalized image batch [B, 1, H, W] plus mask batch [B, 3, H, W].
    pub fn spatial_batch<E: Element>(&self, ids: &[(usize, usize)]) -> (Tensor<E>, Tensor<E>) {
        let hw = self.meta.size * self.meta.size;
        let mut images = Vec::with_capacity(ids.len() * hw);
        let mut masks = Vec::with_capacity(ids.len() * 3 * hw);
        for &(s, t) in ids {
            images.extend(self.image_plane(s, t).iter().map(|&v| E::from_f64(self.normalize(v))));
            masks.extend(self.mask_planes(s, t).iter().map(|&v| E::from_f64(v as f64)));
        }
        (
            Tensor::from_vec(vec![ids.len(), 1, self.meta.size, self.meta.size], images).unwrap(),
            Tensor::from_vec(vec![ids.len(), 3, self.meta.size, self.meta.size], masks).unwrap(),
        )
    }

    /// One full stack: normalized [T, 1, H, W] and masks [T, 3, H, W].
    pub fn stack_batch<E: Element>(&self, stack: usize) -> (Tensor<E>, Tensor<E>) {
        let ids: Vec<(usize, usize)> = (0..self.meta.seq_len).map(|t| (stack, t)).collect();
        self.spatial_batch(&ids)
    }

    /// Raw (unnormalized) image of one slice, for rendering.
    pub fn raw_image(&self, stack: usize, slice: usize) -> Tensor<f32> {
        Tensor::from_vec(
            vec![self.meta.size, self.meta.size],
            self.image_plane(stack, slice).to_vec(),
        )
        .unwrap()
    }

    /// One class plane of one slice as u8.
    pub fn mask_plane(&self, stack: usize, slice: usize, class: usize) -> &[u8] {
        let hw = self.meta.size * self.meta.size;
        &self.mask_planes(stack, slice)[class * hw..(class + 1) * hw]
    }
}

/// Bilinear resampling of [N, C, H, W] to a new spatial extent, used to shrink
/// images to kernel scale for the generator network.
pub fn resize_bilinear<E: Element>(t: &Tensor<E>, out_h: usize, out_w: usize) -> Result<Tensor<E>> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::shape("resize_bilinear", format!("{:?}", s)));
    }
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let data = t.data();
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let src = &data[p * h * w..(p + 1) * h * w];
        for oy in 0..out_h {
            let fy = ((oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5).clamp(0.0, h as f64 - 1.0);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for ox in 0..out_w {
                let fx = ((ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).clamp(0.0, w as f64 - 1.0);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let v00 = src[y0 * w + x0].to_f64();
                let v01 = src[y0 * w + x1].to_f64();
                let v10 = src[y1 * w + x0].to_f64();
                let v11 = src[y1 * w + x1].to_f64();
                let v = v00 * (1.0 - wy) * (1.0 - wx)
                    + v01 * (1.0 - wy) * wx
                    + v10 * wy * (1.0 - wx)
                    + v11 * wy * wx;
                out.push(E::from_f64(v));
            }
        }
    }
    Tensor::from_vec(vec![s[0], s[1], out_h, out_w], out)
}

/// Center-aligned nearest-neighbor resampling of [N, C, H, W]; keeps binary
/// targets binary.
pub fn resize_nearest<E: Element>(t: &Tensor<E>, out_h: usize, out_w: usize) -> Result<Tensor<E>> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::shape("resize_nearest", format!("{:?}", s)));
    }
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let data = t.data();
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let src = &data[p * h * w..(p + 1) * h * w];
        for oy in 0..out_h {
            let sy = (((oy as f64 + 0.5) * h as f64 / out_h as f64) as usize).min(h - 1);
            for ox in 0..out_w {
                let sx = (((ox as f64 + 0.5) * w as f64 / out_w as f64) as usize).min(w - 1);
                out.push(src[sy * w + sx]);
            }
        }
    }
    Tensor::from_vec(vec![s[0], s[1], out_h, out_w], out)
}
