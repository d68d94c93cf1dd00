use psmamba_core::{data, parallel, Model, ModelConfig};

#[test]
fn parallel_and_sequential_paths_agree_bitwise() {
    let cfg = ModelConfig {
        c0: 8,
        channel_step: 8,
        n_blocks: 1,
        state_n: 4,
        ..Default::default()
    };
    let x = psmamba_core::FeatureMap::stack(&[data::synthetic_texture::<f32>(1, 16, 24), data::synthetic_texture(2, 16, 24)]).unwrap();
    let run = || {
        let mut m = Model::<f32>::new(cfg.clone(), 7).unwrap();
        let (y, cache) = m.forward_train(&x).unwrap();
        let gx = m.backward(&cache, &y).unwrap();
        (y, gx, m.store)
    };
    // Several workers even on a single-core machine.
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let par = pool.install(run);
    let seq = parallel::sequential(run);
    assert_eq!(par.0, seq.0);
    assert_eq!(par.1, seq.1);
    assert_eq!(par.2, seq.2);
}
