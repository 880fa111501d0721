use fedbayes::icov::{icov_vb_aggregate, IcovVbParams, IcovVbState};
use fedbayes::update::{PartyId, UpdateMatrix};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

// 5 honest parties sharing a common per-round noise component (overlap),
// 5 Gaussian adversaries; watch whether the latent channel wakes up.
fn main() {
    let args: Vec<String> = std::env::args().collect();
    let d: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2);
    let iters: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(100);
    let window: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(10);
    let k = 20usize;
    let v_s: f64 = 0.0011; // shared-component variance per coord
    let levels = [0.5, 0.8, 1.0, 1.4, 2.0];

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let shared = Normal::new(0.0, v_s.sqrt()).unwrap();
    let adv = Normal::new(0.0, 1.0).unwrap();

    let mut state = IcovVbState::new(d, window, 3);
    let params = IcovVbParams { latent_dim: d, iters, ..IcovVbParams::default() };
    let ids: Vec<PartyId> = (0..10).map(PartyId).collect();
    for round in 0..30u64 {
        let c: DVector<f64> = DVector::from_fn(k, |_, _| shared.sample(&mut rng));
        let mut cols = Vec::new();
        for j in 0..10 {
            if j < 5 {
                let priv_noise = Normal::new(0.0, (2.0 * v_s).sqrt() * levels[j]).unwrap();
                cols.push(&c + DVector::from_fn(k, |_, _| priv_noise.sample(&mut rng)));
            } else {
                cols.push(DVector::from_fn(k, |_, _| adv.sample(&mut rng)));
            }
        }
        let x = UpdateMatrix::from_columns(round, ids.clone(), &cols).unwrap();
        icov_vb_aggregate(&[x], &mut state, &params).unwrap();
        if round % 5 == 4 {
            let vnorms: Vec<String> = (0..10)
                .map(|j| format!("{:.3}", state.party_factor(PartyId(j)).unwrap().v_bar.norm()))
                .collect();
            let sigmas: Vec<String> = (0..10)
                .map(|j| format!("{:.4}", state.sigma_sq(PartyId(j)).unwrap()))
                .collect();
            println!(
                "r{round:2} su2={:.4} sv2={:.5} |v|=[{}] s2=[{}]",
                state.sigma_u_sq, state.sigma_v_sq, vnorms.join(","), sigmas.join(",")
            );
        }
    }
}
