use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

/// `rows x cols` matrix with orthonormal columns (`rows >= cols`), from
/// Gram-Schmidt on a Gaussian draw.
pub(crate) fn random_orthonormal_columns<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    assert!(rows >= cols, "need rows >= cols for orthonormal columns");
    loop {
        let mut m = Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal));
        if orthonormalize_columns(&mut m) {
            return m;
        }
    }
}

/// Modified Gram-Schmidt in place. Returns false on a (numerically) dependent
/// column.
fn orthonormalize_columns(m: &mut Array2<f64>) -> bool {
    for j in 0..m.ncols() {
        for i in 0..j {
            let (done, mut rest) = m.view_mut().split_at(Axis(1), j);
            let prev = done.column(i);
            let mut col = rest.column_mut(0);
            let proj = prev.dot(&col);
            col.scaled_add(-proj, &prev);
        }
        let mut col = m.column_mut(j);
        let norm = col.dot(&col).sqrt();
        if norm < 1e-10 {
            return false;
        }
        col.mapv_inplace(|x| x / norm);
    }
    true
}

/// Semi-orthogonal `rows x cols` map: orthonormal columns when tall, orthonormal
/// rows when wide.
pub(crate) fn random_semi_orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    if rows >= cols {
        random_orthonormal_columns(rows, cols, rng)
    } else {
        random_orthonormal_columns(cols, rows, rng).reversed_axes()
    }
}

pub(crate) fn unit_vector<R: Rng + ?Sized>(d: usize, rng: &mut R) -> ndarray::Array1<f64> {
    random_orthonormal_columns(d, 1, rng).column(0).to_owned()
}
