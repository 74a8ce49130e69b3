//! The three forensic feature branches. Each exposes its fixed
//! (non-learned) extractors as plain functions, and a learned head that
//! turns the extracted planes into a grid of `d`-dimensional tokens.

pub mod high;
pub mod low;
pub mod mid;
mod srm;

#[cfg(test)]
mod tests;

use crate::image::{ImageError, ImagePlane, ImageRGB, LUMA};
use crate::layers::{Binder, Conv, Linear, Standardize};
use crate::tensor::{ConvPadding, Graph, Tensor, TensorError, Var};

pub use srm::{srm_bank, srm_bank_hash, SrmKernel, SRM_BANK_SHA256, SRM_KERNELS};

#[derive(Debug, thiserror::Error)]
pub enum BranchError {
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

pub type Result<T> = std::result::Result<T, BranchError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BranchKind {
    Low,
    Mid,
    High,
}

impl BranchKind {
    pub const ALL: [BranchKind; 3] = [BranchKind::Low, BranchKind::Mid, BranchKind::High];

    pub fn name(self) -> &'static str {
        match self {
            BranchKind::Low => "low",
            BranchKind::Mid => "mid",
            BranchKind::High => "high",
        }
    }
}

/// `G x G` tokens of width `d`, row-major over the grid.
#[derive(Clone, Debug)]
pub struct BranchTokens {
    pub kind: BranchKind,
    pub grid: usize,
    pub tokens: Tensor,
}

/// Unbounded real-valued plane, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl Field {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(BranchError::Dimensions(format!(
                "{} values for a {width}x{height} field",
                values.len()
            )));
        }
        Ok(Self { width, height, values })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self { width, height, values }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Sample with coordinates clamped into the field.
    pub fn at_clamped(&self, x: isize, y: isize) -> f64 {
        let cx = x.clamp(0, self.width as isize - 1) as usize;
        let cy = y.clamp(0, self.height as isize - 1) as usize;
        self.values[cy * self.width + cx]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

impl From<&ImagePlane> for Field {
    fn from(p: &ImagePlane) -> Self {
        Field {
            width: p.width(),
            height: p.height(),
            values: p.values().to_vec(),
        }
    }
}

/// `[H, W, 3]` tensor of an image scaled to `[0, 1]`.
pub fn image_tensor(img: &ImageRGB) -> Tensor {
    Tensor::new(vec![img.height(), img.width(), 3], img.to_unit()).expect("image extents are positive")
}

/// Stacks equally sized fields into an `[H, W, C]` tensor.
pub fn stack_fields(fields: &[&Field]) -> Result<Tensor> {
    let (w, h) = (fields[0].width, fields[0].height);
    if fields.iter().any(|f| f.width != w || f.height != h) {
        return Err(BranchError::Dimensions("stacked planes differ in size".into()));
    }
    let c = fields.len();
    let mut data = vec![0.0; w * h * c];
    for (ci, f) in fields.iter().enumerate() {
        for (i, &v) in f.values.iter().enumerate() {
            data[i * c + ci] = v;
        }
    }
    Ok(Tensor::new(vec![h, w, c], data)?)
}

/// Luma of an `[H, W, 3]` image variable, as `[H, W, 1]`.
pub fn gray_var(g: &mut Graph, rgb: Var) -> Result<Var> {
    let k = g.constant(Tensor::new(vec![1, 1, 3, 1], LUMA.to_vec())?);
    Ok(g.conv2d(rgb, k, 1, ConvPadding::Valid)?)
}

/// Correlates `[H, W, 1]` with a fixed `kh x kw` kernel under clamp-to-edge borders.
pub(crate) fn filter_edge(g: &mut Graph, x: Var, kernel: &[f64], kh: usize, kw: usize) -> Result<Var> {
    let padded = g.pad_edge(x, kh / 2, kw / 2)?;
    let k = g.constant(Tensor::new(vec![kh, kw, 1, 1], kernel.to_vec())?);
    Ok(g.conv2d(padded, k, 1, ConvPadding::Valid)?)
}

/// Standardize, convolve, GELU, then resample to `grid x grid`: `[H, W, Cin] -> [G, G, Cout]`.
pub(crate) fn embed_stream(
    g: &mut Graph,
    p: &mut Binder<'_>,
    norm: &Standardize,
    conv: &Conv,
    x: Var,
    grid: usize,
) -> Result<Var> {
    let x = norm.forward(g, p, x)?;
    let y = conv.forward(g, p, x)?;
    let y = g.gelu(y);
    Ok(g.resample(y, grid, grid)?)
}

/// Concatenates `[G, G, C_i]` streams and projects every cell to a token.
pub(crate) fn project_grid(g: &mut Graph, p: &mut Binder<'_>, proj: &Linear, streams: &[Var], grid: usize) -> Result<Var> {
    let cat = if streams.len() == 1 { streams[0] } else { g.concat_last(streams)? };
    let c = *g.shape(cat).last().unwrap();
    let flat = g.reshape(cat, &[grid * grid, c])?;
    Ok(proj.forward(g, p, flat)?)
}
