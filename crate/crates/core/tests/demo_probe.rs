//! Temporary probe for trainer dynamics (deleted before finalization).
use swhite::trainer::*;

#[test]
fn probe_selection_dynamics() {
    for seed in 0..5u64 {
        let mut finals = vec![];
        for style in [0.0, 2.0] {
            let spec = SyntheticSpec { style_strength: style, seed, ..SyntheticSpec::default() };
            let data: Dataset<f64> = generate_dataset(&spec).unwrap();
            let config = TrainConfig { seed, ..TrainConfig::default() };
            let mut net = DemoNet::new(8, 2, &config.sw, seed).unwrap();
            let log = train(&mut net, &data, &config).unwrap();
            let acc = net.accuracy(&data).unwrap();
            // omega layout [bw, iw]: index 1 = iw
            finals.push((style, log.final_mean_omega_prime(1), log.final_loss(), acc));
        }
        println!(
            "seed {seed}: style0 w'_iw={:.4} loss={:.4} acc={:.3} | style2 w'_iw={:.4} loss={:.4} acc={:.3} | iw_higher={}",
            finals[0].1, finals[0].2, finals[0].3, finals[1].1, finals[1].2, finals[1].3,
            finals[1].1 > finals[0].1
        );
    }
}
