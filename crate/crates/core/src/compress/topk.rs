use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::{CompressedMessage, LayerCompressor, Round, SparseMatrix, StepOutput};

/// `⌈k_fraction · n⌉`, at least 1 and at most `n`.
pub fn topk_count(k_fraction: f64, n: usize) -> usize {
    // Guard against products like 0.1 * 30 = 3.0000000000000004.
    let k = (k_fraction * n as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(n)
}

fn select(g: &Matrix, k: usize) -> SparseMatrix {
    let mut order: Vec<usize> = (0..g.len()).collect();
    let data = g.data();
    order.sort_by(|&a, &b| data[b].abs().total_cmp(&data[a].abs()).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = order[..k].to_vec();
    chosen.sort_unstable();
    SparseMatrix {
        rows: g.rows(),
        cols: g.cols(),
        indices: chosen.iter().map(|&i| i as u32).collect(),
        values: chosen.iter().map(|&i| data[i]).collect(),
    }
}

/// Keeps the `⌈k_fraction · nm⌉` largest-magnitude entries of `g + error`
/// (ties to the lowest flat index) and leaves the rest in `error`.
pub fn compress_topk(g: &Matrix, k_fraction: f64, error: &mut Matrix) -> Result<CompressedMessage> {
    if !(k_fraction > 0.0 && k_fraction <= 1.0) {
        return Err(Error::Config(format!("k_fraction must be in (0, 1], got {k_fraction}")));
    }
    let corrected = g.add(error)?;
    let sparse = select(&corrected, topk_count(k_fraction, g.len()));
    *error = corrected.sub(&sparse.to_dense()?)?;
    Ok(CompressedMessage::TopKSparse(sparse))
}

pub struct TopKCompressor {
    k_fraction: f64,
    error_feedback: bool,
    error: Matrix,
    pending: Option<Matrix>,
}

impl TopKCompressor {
    pub fn new(dims: (usize, usize), k_fraction: f64, error_feedback: bool) -> Self {
        Self { k_fraction, error_feedback, error: Matrix::zeros(dims.0, dims.1), pending: None }
    }
}

impl LayerCompressor for TopKCompressor {
    fn begin(&mut self, grad: &Matrix) -> Result<CompressedMessage> {
        grad.expect_dims(self.error.dims())?;
        let mut residual = self.error.clone();
        let msg = compress_topk(grad, self.k_fraction, &mut residual)?;
        if self.error_feedback {
            self.error = residual;
        }
        self.pending = Some(msg.reconstruct()?);
        Ok(msg)
    }

    fn absorb(&mut self, aggregate: Matrix) -> Result<Round> {
        let sent = self.pending.take().ok_or_else(|| Error::Protocol("absorb before begin".into()))?;
        aggregate.expect_dims(self.error.dims())?;
        Ok(Round::Done(StepOutput { update: aggregate, transmitted: sent }))
    }

    fn error(&self) -> Option<&Matrix> {
        Some(&self.error)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::{decode, LayerShape, SPARSE_ENTRY_BITS, TOPK_HEADER_BITS};

    #[test]
    fn keeps_largest_magnitudes() {
        let g = Matrix::from_rows(&[&[3.0, -1.0, 0.5, -4.0]]).unwrap();
        let mut e = Matrix::zeros(1, 4);
        let msg = compress_topk(&g, 0.5, &mut e).unwrap();
        assert_eq!(msg.reconstruct().unwrap().data(), &[3.0, 0.0, 0.0, -4.0]);
        assert_eq!(e.data(), &[0.0, -1.0, 0.5, 0.0]);
    }

    #[test]
    fn full_fraction_is_lossless() {
        let g = Matrix::from_rows(&[&[1.0, 2.0], &[-3.0, 0.25]]).unwrap();
        let mut e = Matrix::zeros(2, 2);
        let msg = compress_topk(&g, 1.0, &mut e).unwrap();
        assert_eq!(decode(&msg, &LayerShape::of(&[2, 2])).unwrap(), g);
        assert_eq!(e, Matrix::zeros(2, 2));
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let g = Matrix::from_rows(&[&[1.0, -1.0, 1.0, 0.5]]).unwrap();
        let mut e = Matrix::zeros(1, 4);
        let CompressedMessage::TopKSparse(s) = compress_topk(&g, 0.5, &mut e).unwrap() else {
            panic!()
        };
        assert_eq!(s.indices, vec![0, 1]);
    }

    #[test]
    fn wire_size_is_pairs_plus_header() {
        let g = Matrix::from_fn(10, 10, |i, j| (i * 10 + j) as f64);
        let mut e = Matrix::zeros(10, 10);
        let msg = compress_topk(&g, 0.07, &mut e).unwrap();
        let w = msg.wire_size();
        assert_eq!(w.payload_bits, 7 * (32 + 32));
        assert_eq!(w.payload_bits, 7 * SPARSE_ENTRY_BITS);
        assert_eq!(w.metadata_bits, TOPK_HEADER_BITS);
        assert_eq!(msg.encode().len() as u64 * 8, w.total_bits());
    }

    #[test]
    fn count_rounding() {
        assert_eq!(topk_count(0.1, 30), 3);
        assert_eq!(topk_count(0.101, 30), 4);
        assert_eq!(topk_count(1e-9, 30), 1);
        assert_eq!(topk_count(1.0, 30), 30);
    }

    #[test]
    fn error_feedback_accumulates_unsent_mass() {
        let g = Matrix::from_rows(&[&[1.0, 0.6]]).unwrap();
        let mut c = TopKCompressor::new((1, 2), 0.5, true);
        let mut sent = Vec::new();
        for _ in 0..2 {
            let msg = c.begin(&g).unwrap();
            sent.push(msg.reconstruct().unwrap());
            let _ = c.absorb(msg.reconstruct().unwrap()).unwrap();
        }
        // Step 1 sends 1.0, residual 0.6 grows to 1.2 and wins step 2.
        assert_eq!(sent[0].data(), &[1.0, 0.0]);
        assert_eq!(sent[1].data(), &[0.0, 1.2]);
        assert_eq!(c.error().unwrap().data(), &[1.0, 0.0]);

        let mut no_ef = TopKCompressor::new((1, 2), 0.5, false);
        for _ in 0..2 {
            let msg = no_ef.begin(&g).unwrap();
            assert_eq!(msg.reconstruct().unwrap().data(), &[1.0, 0.0]);
            let _ = no_ef.absorb(msg.reconstruct().unwrap()).unwrap();
        }
    }
}
