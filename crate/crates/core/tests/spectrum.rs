use approx::assert_relative_eq;
use keldysh::spectral::{eigenvalue_count, product_spectrum, Band};

#[test]
fn state_count_follows_the_volume_law() {
    // three-dimensional manifold of volume 2π·4π: N(Λ) ≈ (4/3) Λ^{3/2}
    let cut = 400.0;
    let s = product_spectrum(1.0, 1.0, 0.0, cut).unwrap();
    let n = eigenvalue_count(&s, cut, Band::All).unwrap() as f64;
    assert_relative_eq!(n, 4.0 / 3.0 * cut.powf(1.5), max_relative = 0.1);
}

#[test]
fn bands_partition_the_spectrum() {
    let s = product_spectrum(1.7, 0.6, 0.3, 40.0).unwrap();
    let total = eigenvalue_count(&s, 40.0, Band::All).unwrap();
    let ells: u64 = (0..20).map(|l| eigenvalue_count(&s, 40.0, Band::Ell(l)).unwrap()).sum();
    assert_eq!(total, ells);
    assert_eq!(total, s.total_states());
}
