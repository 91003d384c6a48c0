use num_traits::Num;

/// Both sides of the guided-then-guided composition identity.
///
/// `lhs` applies inference guidance `w2` with negative condition to a
/// student that reproduces the teacher guided with `w` against the null
/// condition. `rhs` is the closed form
/// `w w2 (eps_c - ((1 - a) eps_neg + a eps_null)) + eps_neg`, `a = (w - 1)/(w w2)`.
/// Exact for rational `T`.
pub fn cfg_composition_identity<T: Num + Copy>(
    eps_c: [T; 2],
    eps_neg: [T; 2],
    eps_null: [T; 2],
    w: T,
    w2: T,
) -> ([T; 2], [T; 2]) {
    let guided = |e: T, n: T| n + w * (e - n);
    let a = (w - T::one()) / (w * w2);
    let mut lhs = [T::zero(); 2];
    let mut rhs = [T::zero(); 2];
    for k in 0..2 {
        let sc = guided(eps_c[k], eps_null[k]);
        let sn = guided(eps_neg[k], eps_null[k]);
        lhs[k] = sn + w2 * (sc - sn);
        let mix = (T::one() - a) * eps_neg[k] + a * eps_null[k];
        rhs[k] = w * w2 * (eps_c[k] - mix) + eps_neg[k];
    }
    (lhs, rhs)
}
