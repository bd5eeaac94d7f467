//! Property-based invariants.

use entangle::context::exact_projector;
use entangle::net::{Activation, Architecture, NetworkParams};
use entangle::power;
use entangle::stage_rng;
use ndarray::Array2;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Architecture widths always sum to the neuron budget, stay positive,
    /// and are nonincreasing for contraction <= 1.
    #[test]
    fn architecture_widths_invariants(
        depth in 1usize..=5,
        m_l in 1usize..=12,
        extra in 0usize..200,
        c in 0.25f64..=1.0,
    ) {
        let m = depth * m_l + extra;
        if let Ok(arch) = Architecture::new(64, depth, m_l, m, c) {
            let widths = arch.layer_widths().unwrap();
            prop_assert_eq!(widths.len(), depth);
            prop_assert_eq!(widths.iter().sum::<usize>(), m);
            prop_assert!(widths.iter().all(|&w| w >= 1));
            prop_assert!(widths.windows(2).all(|p| p[0] >= p[1]));
            prop_assert_eq!(*widths.last().unwrap(), m_l);
        }
    }

    /// Network JSON serialization round-trips bit-exactly.
    #[test]
    fn network_json_round_trip(seed in 0u64..1000, d in 2usize..6, w1 in 1usize..5, w2 in 1usize..4) {
        let mut rng = stage_rng(seed, "prop-json");
        let net = NetworkParams::sample(d, &[w1, w2], Activation::Tanh, &mut rng).unwrap();
        let text = serde_json::to_string(&net.to_json()).unwrap();
        let back = NetworkParams::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        for l in 0..net.depth() {
            let (a, b) = (net.weight(l), back.weight(l));
            prop_assert_eq!(a.shape(), b.shape());
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    /// Phi stays in [0, 1] on the unit sphere for random spike subspaces.
    #[test]
    fn phi_bounded_on_sphere(seed in 0u64..500, d in 3usize..10, k in 1usize..6) {
        let mut rng = stage_rng(seed, "prop-phi");
        let net = NetworkParams::sample(d, &[k.min(d)], Activation::Tanh, &mut rng).unwrap();
        if let Ok(p) = exact_projector(&net.weight(0).view()) {
            for _ in 0..8 {
                let u = entangle::derivatives::sample_points(
                    &entangle::derivatives::SamplingLaw::uniform_sphere(d, 1.0),
                    1,
                    &mut rng,
                ).unwrap().row(0).to_owned();
                let v = power::phi(&p, &u.view());
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v), "phi = {}", v);
            }
        }
    }

    /// Hessians produced by the batch samplers are exactly symmetric.
    #[test]
    fn hessian_batches_symmetric(seed in 0u64..200) {
        let mut rng = stage_rng(seed, "prop-hess");
        let net = NetworkParams::sample(4, &[3, 2], Activation::Tanh, &mut rng).unwrap();
        let law = entangle::derivatives::SamplingLaw::uniform_sphere(4, 0.5);
        let batch = entangle::derivatives::HessianBatch::sample_fd(&net, &law, 2, 1e-3, &mut rng).unwrap();
        for h in &batch.mats {
            let ht: Array2<f64> = h.t().to_owned();
            for (a, b) in h.iter().zip(ht.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
