use lgat::config::{ModelConfig, Variant};
use lgat::model::{forward_with_cache, param_counts, AttnTrace, ModelCache, ModelWeights};
use lgat::Rng;

fn build(variant: Variant, lgz: usize) -> ModelWeights {
    let cfg = ModelConfig { lgz, n_layer: 4, ..ModelConfig::desk(variant) };
    ModelWeights::build(&cfg, &mut Rng::new(11)).unwrap()
}

#[test]
fn followers_read_the_leader_latents() {
    let w = build(Variant::EgMla, 2);
    let mut cache = ModelCache::new(&w.config);
    let (_, trace) = forward_with_cache(&w, &[3, 1, 4, 1, 5], &mut cache, true).unwrap();
    let blocks = trace.unwrap().blocks;
    let latents: Vec<_> = blocks
        .iter()
        .map(|b| match &b.attn {
            AttnTrace::Latent(t) => (t.latents.clone(), t.k_rope.clone(), t.latent_raw.is_some()),
            AttnTrace::Dense(_) => unreachable!(),
        })
        .collect();
    for pair in latents.chunks(2) {
        let (leader, follower) = (&pair[0], &pair[1]);
        assert!(leader.2 && !follower.2, "only leaders compute latents");
        assert!(leader.0.bit_eq(&follower.0));
        assert!(leader.1.bit_eq(&follower.1));
    }
    assert!(!latents[0].0.bit_eq(&latents[2].0));
    assert_eq!(cache.len(), 5);
}

#[test]
fn grouping_halves_shared_matrices_and_cache() {
    for v in Variant::ALL {
        let one = build(v, 1);
        let two = build(v, 2);
        assert_eq!(one.groups.len(), 4);
        assert_eq!(two.groups.len(), 2);
        assert_eq!(param_counts(&two.config).kv_down_matrices * 2, param_counts(&one.config).kv_down_matrices);
        let names = |w: &ModelWeights| w.tensors().into_iter().filter(|(n, _)| n.starts_with("group.")).count();
        assert_eq!(names(&one), 2 * names(&two));
        let (mut c1, mut c2) = (ModelCache::new(&one.config), ModelCache::new(&two.config));
        forward_with_cache(&one, &[1, 2, 3], &mut c1, false).unwrap();
        forward_with_cache(&two, &[1, 2, 3], &mut c2, false).unwrap();
        assert_eq!(c1.elements(), 2 * c2.elements(), "{v}");
    }
}

#[test]
fn group_size_must_divide_layers() {
    let cfg = ModelConfig { lgz: 3, n_layer: 4, ..ModelConfig::desk(Variant::Mla) };
    let err = ModelWeights::build(&cfg, &mut Rng::new(0)).unwrap_err();
    assert!(err.to_string().contains("does not divide"), "{err}");
}
