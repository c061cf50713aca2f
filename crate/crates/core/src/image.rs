use crate::diff::{DiffError, Tensor};

/// `H × W × C` image with channels-last layout, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    tensor: Tensor<f32>,
}

impl Image {
    pub fn new(tensor: Tensor<f32>) -> Result<Self, DiffError> {
        if tensor.dims().len() != 3 {
            return Err(DiffError::Shape {
                node: 0,
                op: "image",
                detail: format!("images are [H, W, C], got {:?}", tensor.dims()),
            });
        }
        if !tensor.is_finite() {
            return Err(DiffError::NonFinite { node: 0, op: "image" });
        }
        Ok(Self { tensor })
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f32) -> Self {
        Self {
            tensor: Tensor::full(&[h, w, c], value),
        }
    }

    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    data.push(f(i, j, k));
                }
            }
        }
        Self {
            tensor: Tensor::new(vec![h, w, c], data).expect("sized by construction"),
        }
    }

    pub fn height(&self) -> usize {
        self.tensor.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.dims()[1]
    }

    pub fn channels(&self) -> usize {
        self.tensor.dims()[2]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.tensor
    }

    pub fn data(&self) -> &[f32] {
        self.tensor.data()
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        self.tensor.data_mut()
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.tensor.data()[(i * self.width() + j) * self.channels() + k]
    }

    pub fn clamp01(mut self) -> Self {
        for v in self.tensor.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data()
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}
