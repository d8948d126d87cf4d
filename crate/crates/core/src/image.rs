//! Single-channel images with intensities nominally in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// A grayscale image stored row-major as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if h * w != data.len() {
            return Err(Error::Shape(format!(
                "image {h}x{w} needs {} pixels, got {}",
                h * w,
                data.len()
            )));
        }
        Ok(Image { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Image {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Mean intensity.
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// View as a `[1, 1, h, w]` tensor in the requested precision.
    pub fn to_tensor<R: Real>(&self) -> Tensor<R> {
        let data = self.data.iter().map(|&v| R::of(v as f64)).collect();
        Tensor::new(&[1, 1, self.h, self.w], data).expect("image shape is consistent")
    }

    /// Stack images of equal extent into a `[B, 1, h, w]` batch tensor.
    pub fn batch_to_tensor<R: Real>(images: &[&Image]) -> Result<Tensor<R>> {
        if images.is_empty() {
            return Err(Error::Contract("cannot batch zero images".into()));
        }
        let (h, w) = (images[0].h, images[0].w);
        let mut data = Vec::with_capacity(images.len() * h * w);
        for im in images {
            if (im.h, im.w) != (h, w) {
                return Err(Error::Shape(format!(
                    "batch mixes extents {h}x{w} and {}x{}",
                    im.h, im.w
                )));
            }
            data.extend(im.data.iter().map(|&v| R::of(v as f64)));
        }
        Tensor::new(&[images.len(), 1, h, w], data)
    }

    /// Extract batch element `b`, channel 0, of a `[B, 1, h, w]` tensor.
    pub fn from_tensor<R: Real>(t: &Tensor<R>, b: usize) -> Result<Image> {
        let (bs, c, h, w) = t.dims4()?;
        if c != 1 {
            return Err(Error::Shape(format!(
                "from_tensor expects a single-channel tensor, got {c} channels"
            )));
        }
        if b >= bs {
            return Err(Error::Contract(format!(
                "batch index {b} out of range for batch {bs}"
            )));
        }
        let data = t.data()[b * h * w..(b + 1) * h * w]
            .iter()
            .map(|&v| v.as_f64() as f32)
            .collect();
        Image::new(h, w, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip() {
        let im = Image::new(2, 3, vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        let t: Tensor<f64> = im.to_tensor();
        assert_eq!(t.shape(), &[1, 1, 2, 3]);
        let back = Image::from_tensor(&t, 0).unwrap();
        assert_eq!(back, im);
    }

    #[test]
    fn batching_checks_extents() {
        let a = Image::zeros(2, 2);
        let b = Image::zeros(2, 3);
        assert!(Image::batch_to_tensor::<f32>(&[&a, &b]).is_err());
        let t = Image::batch_to_tensor::<f32>(&[&a, &a]).unwrap();
        assert_eq!(t.shape(), &[2, 1, 2, 2]);
    }
}
