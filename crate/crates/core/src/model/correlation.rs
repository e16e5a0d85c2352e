//! Pixel-wise cross-correlation expressed as one matrix product.
//!
//! With template features flattened to `C x wh` and search features to
//! `C x WH`, the correlation volume is `templateᵀ · search`, shape `wh x WH`:
//! entry `(i, j)` is the dot product of template cell `i` and search cell `j`.

use ndarray::{Array2, ArrayView2};

use crate::error::{FearError, Result};
use crate::float::Float;

pub fn pixel_wise_correlation<T: Float>(
    template: ArrayView2<'_, T>,
    search: ArrayView2<'_, T>,
) -> Result<Array2<T>> {
    if template.nrows() != search.nrows() {
        return Err(FearError::ChannelMismatch {
            template: template.nrows(),
            search: search.nrows(),
        });
    }
    Ok(template.t().dot(&search))
}

/// Gradients of the correlation w.r.t. template and search given `d_corr`.
pub fn correlation_backward<T: Float>(
    template: ArrayView2<'_, T>,
    search: ArrayView2<'_, T>,
    d_corr: ArrayView2<'_, T>,
) -> (Array2<T>, Array2<T>) {
    let d_template = search.dot(&d_corr.t());
    let d_search = template.dot(&d_corr);
    (d_template, d_search)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn scalar_channel() {
        let t = array![[1.0f64]];
        let s = array![[2.0f64, 3.0]];
        let c = pixel_wise_correlation(t.view(), s.view()).unwrap();
        assert_eq!(c, array![[2.0, 3.0]]);
    }

    #[test]
    fn orthogonal_cells_give_zero() {
        // template cells live on channels 0..2, search cells on channels 2..4
        let t = array![[1.0f64, 0.5], [2.0, -1.0], [0.0, 0.0], [0.0, 0.0]];
        let s = array![[0.0f64, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let c = pixel_wise_correlation(t.view(), s.view()).unwrap();
        assert!(c.iter().all(|&v| v == 0.0));
        assert_eq!(c.dim(), (2, 3));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let t = Array2::<f64>::zeros((3, 4));
        let s = Array2::<f64>::zeros((2, 9));
        assert!(matches!(
            pixel_wise_correlation(t.view(), s.view()),
            Err(FearError::ChannelMismatch { template: 3, search: 2 })
        ));
    }
}
