//! Dense displacement fields and the Middlebury `.flo` container.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Magic tag of a `.flo` file; reads as the float 202021.25 in little endian.
pub const FLO_MAGIC: &[u8; 4] = b"PIEH";

/// A `height × width` field of `(u, v)` pixel displacements, stored row-major
/// with `u` and `v` interleaved, as on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 2],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 2 {
            return Err(Error::contract(format!(
                "flow data length {} does not match {width}x{height}x2",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 2]) -> Self {
        let mut data = Vec::with_capacity(width * height * 2);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn constant(width: usize, height: usize, u: f32, v: f32) -> Self {
        Self::from_fn(width, height, |_, _| [u, v])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 2] {
        let i = 2 * (y * self.width + x);
        [self.data[i], self.data[i + 1]]
    }

    pub fn set(&mut self, x: usize, y: usize, uv: [f32; 2]) {
        let i = 2 * (y * self.width + x);
        self.data[i] = uv[0];
        self.data[i + 1] = uv[1];
    }

    pub fn nonzero_count(&self) -> usize {
        self.data
            .chunks_exact(2)
            .filter(|uv| uv[0] != 0.0 || uv[1] != 0.0)
            .count()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    /// Mirrors the field left-right and negates `u`.
    pub fn flip_horizontal(&self) -> Self {
        let w = self.width;
        Self::from_fn(w, self.height, |x, y| {
            let [u, v] = self.get(w - 1 - x, y);
            [-u, v]
        })
    }

    /// Bilinear resize (half-pixel centres) with displacements rescaled to the
    /// new pixel grid.
    pub fn resize(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = width as f32 / self.width as f32;
        let sy = height as f32 / self.height as f32;
        let u: Vec<f32> = self.data.iter().step_by(2).copied().collect();
        let v: Vec<f32> = self.data.iter().skip(1).step_by(2).copied().collect();
        let u = crate::imaging::resize_plane(&u, self.width, self.height, width, height);
        let v = crate::imaging::resize_plane(&v, self.width, self.height, width, height);
        let data = u
            .iter()
            .zip(&v)
            .flat_map(|(&a, &b)| [a * sx, b * sy])
            .collect();
        Self {
            width,
            height,
            data,
        }
    }

    /// Average-pools to `width × height` and rescales displacements to the
    /// coarser grid. Source dimensions must be integer multiples of the target.
    pub fn downscale(&self, width: usize, height: usize) -> Result<Self> {
        if width == 0
            || height == 0
            || self.width % width != 0
            || self.height % height != 0
        {
            return Err(Error::contract(format!(
                "cannot downscale {}x{} flow to {width}x{height}: non-integer ratio",
                self.width, self.height
            )));
        }
        let (bx, by) = (self.width / width, self.height / height);
        let norm = 1.0 / (bx * by) as f64;
        let (su, sv) = (width as f64 / self.width as f64, height as f64 / self.height as f64);
        Ok(Self::from_fn(width, height, |x, y| {
            let (mut u, mut v) = (0f64, 0f64);
            for yy in y * by..(y + 1) * by {
                for xx in x * bx..(x + 1) * bx {
                    let [a, b] = self.get(xx, yy);
                    u += a as f64;
                    v += b as f64;
                }
            }
            [(u * norm * su) as f32, (v * norm * sv) as f32]
        }))
    }

    pub fn to_flo_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.data.len());
        out.extend_from_slice(FLO_MAGIC);
        out.extend_from_slice(&(self.width as i32).to_le_bytes());
        out.extend_from_slice(&(self.height as i32).to_le_bytes());
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_flo_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 12 {
            return Err(format!("file too short ({} bytes)", bytes.len()));
        }
        if &bytes[..4] != FLO_MAGIC {
            return Err("missing PIEH magic".into());
        }
        let int = |i: usize| i32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let (w, h) = (int(4), int(8));
        if w <= 0 || h <= 0 {
            return Err(format!("invalid dimensions {w}x{h}"));
        }
        let (w, h) = (w as usize, h as usize);
        let expected = 12 + w * h * 2 * 4;
        if bytes.len() != expected {
            return Err(format!(
                "expected {expected} bytes for {w}x{h}, found {}",
                bytes.len()
            ));
        }
        let data = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }

    pub fn write_flo(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_flo_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_flo(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_flo_bytes(&bytes).map_err(|reason| Error::FlowFormat {
            path: path.to_path_buf(),
            reason,
        })
    }
}

/// Past flow `f(2→1)` and future flow `f(2→3)`, both anchored at frame 2.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowPair {
    pub past: FlowField,
    pub future: FlowField,
}

impl FlowPair {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            past: FlowField::zeros(width, height),
            future: FlowField::zeros(width, height),
        }
    }

    pub fn width(&self) -> usize {
        self.past.width()
    }

    pub fn height(&self) -> usize {
        self.past.height()
    }

    pub fn flip_horizontal(&self) -> Self {
        Self {
            past: self.past.flip_horizontal(),
            future: self.future.flip_horizontal(),
        }
    }

    pub fn resize(&self, width: usize, height: usize) -> Self {
        Self {
            past: self.past.resize(width, height),
            future: self.future.resize(width, height),
        }
    }

    pub fn downscale(&self, width: usize, height: usize) -> Result<Self> {
        Ok(Self {
            past: self.past.downscale(width, height)?,
            future: self.future.downscale(width, height)?,
        })
    }
}

/// Same as [`FlowField::downscale`], applied to one field.
pub fn downscale_flow(flow: &FlowField, width: usize, height: usize) -> Result<FlowField> {
    flow.downscale(width, height)
}
