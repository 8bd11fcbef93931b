use radformer_core::presets::{GlobalPreset, LocalPreset};

#[test]
fn paper_shapes() {
    assert_eq!(GlobalPreset::Paper50.spec().feature_shape(), Some((7, 7, 2048)));
    assert_eq!(GlobalPreset::Paper18.spec().feature_shape(), Some((7, 7, 512)));
    assert_eq!(LocalPreset::Paper33.spec().feature_shape(), Some((24, 24, 2048)));
    assert_eq!(LocalPreset::Paper33.spec().receptive_field().size, 33);
}

#[test]
fn toy_shapes() {
    assert_eq!(GlobalPreset::Toy.spec().feature_shape(), Some((8, 8, 64)));
    let local = LocalPreset::Toy.spec();
    assert_eq!(local.feature_shape(), Some((4, 4, 64)));
    assert_eq!(local.receptive_field().size, 17);
}

#[test]
fn residual_block_count() {
    let spec = GlobalPreset::Paper50.spec();
    assert_eq!(spec.stages.iter().map(|s| s.blocks).sum::<usize>(), 16);
}
