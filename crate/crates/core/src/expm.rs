//! Matrix exponential: scaling and squaring with the [13/13] Padé approximant.

use crate::linalg::{flush_tiny, inverse, norm1, Mat};
use crate::error::Result;

const THETA_13: f64 = 5.371920351148152;

const B: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

pub fn expm(a: &Mat) -> Result<Mat> {
    let n = a.nrows();
    if n == 0 {
        return Ok(a.clone());
    }
    let nrm = norm1(a);
    if nrm == 0.0 {
        return Ok(Mat::eye(n));
    }
    let s = if nrm > THETA_13 {
        (nrm / THETA_13).log2().ceil() as i32
    } else {
        0
    };
    // Entries that would underflow into subnormals make BLAS very slow; they are dropped.
    let a = flush_tiny(a * 2f64.powi(-s));
    let id = Mat::eye(n);
    let a2 = flush_tiny(a.dot(&a));
    let a4 = flush_tiny(a2.dot(&a2));
    let a6 = flush_tiny(a4.dot(&a2));

    let inner_u = &a6 * B[13] + &a4 * B[11] + &a2 * B[9];
    let u = a.dot(&(a6.dot(&inner_u) + &a6 * B[7] + &a4 * B[5] + &a2 * B[3] + &id * B[1]));
    let inner_v = &a6 * B[12] + &a4 * B[10] + &a2 * B[8];
    let v = a6.dot(&inner_v) + &a6 * B[6] + &a4 * B[4] + &a2 * B[2] + &id * B[0];

    let p = &v + &u;
    let q = &v - &u;
    let mut r = flush_tiny(inverse(&q)?.dot(&p));
    for _ in 0..s {
        r = flush_tiny(r.dot(&r));
    }
    Ok(r)
}
