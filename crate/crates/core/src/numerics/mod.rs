//! Dense tensors and the deterministic reductions shared by every attention path.
//!
//! All reductions here visit elements in a fixed order, so identical inputs
//! produce bit-identical outputs regardless of thread count.

mod tensor;

pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Sums `partials` over a fixed pairwise tree in ascending index order.
///
/// Level `k` of the tree adds neighbours `(2i, 2i+1)` of level `k-1`; an odd
/// trailing element is carried up unchanged. The recursion below visits the
/// same tree by splitting at the largest power of two below the length.
pub fn block_sum_reduce(partials: &[f32]) -> Result<f32> {
    if partials.is_empty() {
        return Err(Error::InvalidArgument("block_sum_reduce of empty input".into()));
    }
    Ok(pairwise(partials))
}

fn pairwise(xs: &[f32]) -> f32 {
    match xs.len() {
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n.next_power_of_two() / 2;
            pairwise(&xs[..mid]) + pairwise(&xs[mid..])
        }
    }
}

/// Inner product accumulated left to right in `f32`.
pub fn dot(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "dot of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(dot_unchecked(a, b))
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Softmax with max subtraction. The denominator goes through
/// [`block_sum_reduce`].
pub fn stable_softmax(scores: &[f32]) -> Result<Vec<f32>> {
    let mut out = scores.to_vec();
    stable_softmax_in_place(&mut out)?;
    Ok(out)
}

pub fn stable_softmax_in_place(scores: &mut [f32]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("softmax of empty input".into()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "softmax input {i} is not finite ({})",
            scores[i]
        )));
    }
    let max = max_of(scores);
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
    }
    // max-subtraction guarantees one term equals exactly 1, so denom >= 1
    let denom = pairwise(scores);
    for s in scores.iter_mut() {
        *s /= denom;
    }
    Ok(())
}

pub(crate) fn max_of(xs: &[f32]) -> f32 {
    xs.iter().copied().fold(f32::NEG_INFINITY, f32::max)
}

/// Index of the largest element; ties go to the lowest index.
pub fn argmax(xs: &[f32]) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &x) in xs.iter().enumerate() {
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn softmax_oracle(xs: &[f32]) -> Vec<f64> {
        let e: Vec<f64> = xs.iter().map(|&x| (x as f64).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(stable_softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(stable_softmax(&[-1234.5]).unwrap(), vec![1.0]);
        assert_eq!(stable_softmax(&[7.0e3]).unwrap(), vec![1.0]);

        let oracle = softmax_oracle(&[1.0, 2.0, 3.0]);
        let frozen = [0.09003057, 0.24472847, 0.66524096];
        for (o, f) in oracle.iter().zip(frozen) {
            assert!((o - f as f64).abs() < 1e-7);
        }
        let got = stable_softmax(&[1.0, 2.0, 3.0]).unwrap();
        for (g, f) in got.iter().zip(frozen) {
            assert!((g - f).abs() <= 1e-6, "{g} vs {f}");
        }
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(stable_softmax(&[]), Err(Error::InvalidArgument(_))));
        assert!(stable_softmax(&[1.0, f32::NAN]).is_err());
        assert!(stable_softmax(&[f32::INFINITY]).is_err());
    }

    #[test]
    fn softmax_survives_large_magnitudes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f32> = (0..8192).map(|_| rng.random_range(-1.0e4..1.0e4)).collect();
        let p = stable_softmax(&xs).unwrap();
        let s: f64 = p.iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() <= 1e-6);
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn block_sum_examples() {
        assert_eq!(block_sum_reduce(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 10.0);
        assert_eq!(block_sum_reduce(&[-2.5]).unwrap(), -2.5);
        assert!(block_sum_reduce(&[]).is_err());
    }

    /// Level-by-level pairing, written independently of the recursive split.
    fn levelwise(xs: &[f32]) -> f32 {
        let mut level = xs.to_vec();
        while level.len() > 1 {
            level = level
                .chunks(2)
                .map(|c| if c.len() == 2 { c[0] + c[1] } else { c[0] })
                .collect();
        }
        level[0]
    }

    #[test]
    fn block_sum_matches_fold_and_tree_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1024);
        let xs: Vec<f32> = (0..1024).map(|_| rng.random_range(0.0..1.0)).collect();
        let fold = xs.iter().fold(0.0f32, |a, &x| a + x);
        let got = block_sum_reduce(&xs).unwrap();
        assert!(((got - fold) / fold).abs() <= 1e-5);
        assert_eq!(got.to_bits(), block_sum_reduce(&xs).unwrap().to_bits());
        for n in 1..70 {
            let v: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert_eq!(pairwise(&v).to_bits(), levelwise(&v).to_bits(), "n={n}");
        }
    }

    #[test]
    fn dot_examples() {
        assert_eq!(dot(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(dot(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 14.0);
        assert!(matches!(dot(&[1.0], &[1.0, 2.0]), Err(Error::Shape(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let a: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let oracle: f64 = a.iter().zip(&b).map(|(&x, &y)| x as f64 * y as f64).sum();
        let got = dot(&a, &b).unwrap() as f64;
        assert!(((got - oracle) / oracle).abs() <= 1e-5);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(
            xs in prop::collection::vec(-3200i32..3200, 1..64),
            c in -100i32..100,
        ) {
            // dyadic grid keeps x + c exact in f32
            let xs: Vec<f32> = xs.into_iter().map(|v| v as f32 / 64.0).collect();
            let c = c as f32;
            let a = stable_softmax(&xs).unwrap();
            let shifted: Vec<f32> = xs.iter().map(|x| x + c).collect();
            let b = stable_softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }

        #[test]
        fn softmax_sums_to_one(xs in prop::collection::vec(-1.0e4f32..1.0e4, 1..512)) {
            let p = stable_softmax(&xs).unwrap();
            let s: f64 = p.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn softmax_preserves_argmax(xs in prop::collection::vec(-20i32..20, 1..32)) {
            let xs: Vec<f32> = xs.into_iter().map(|v| v as f32).collect();
            prop_assert_eq!(argmax(&stable_softmax(&xs).unwrap()), argmax(&xs));
        }
    }
}
