//! Shape contracts at the full 19-class, 256 x 256 configuration, asserted
//! on freshly initialized models without any training.

use semsynth::attention::AttentionConfig;
use semsynth::config::RunConfig;
use semsynth::data::generate_scene;
use semsynth::mask_embedder::SPATIAL_SIDE;
use semsynth::model::Models;
use semsynth::nn::ParamSet;

#[test]
pub fn full_configuration_contracts() {
    let cfg = RunConfig::full_scale(19);
    cfg.validate().unwrap();
    assert_eq!(cfg.style_width(), 1280);
    let models = Models::<f32>::new(cfg.clone()).unwrap();

    let pair = generate_scene(&cfg.scene_config(), 0).unwrap();
    assert_eq!(pair.mask.num_classes(), 19);

    // style codes are C x 1280
    let styles = models.encoder.encode_styles(&pair.image, &pair.mask).unwrap();
    assert_eq!((styles.num_classes, styles.width), (19, 1280));
    assert_eq!(styles.values.len(), 19 * 1280);

    // the mask embedding is C x 16 x 16
    let emb = models.embedder.embed_mask(&pair.mask).unwrap();
    assert_eq!(emb.spatial_shape(), [19, SPATIAL_SIDE, SPATIAL_SIDE]);

    // self-attention sits at 16/32/64 only; block i runs at 8 * 2^(i+1)
    let mut self_attn_blocks = std::collections::BTreeSet::new();
    models.generator.visit(&mut |p| {
        if let Some(rest) = p.name.strip_prefix("generator.block") {
            if rest.contains(".self_attn") {
                let i: usize = rest.split('.').next().unwrap().parse().unwrap();
                self_attn_blocks.insert(8usize << (i + 1));
            }
        }
    });
    assert_eq!(
        self_attn_blocks.into_iter().collect::<Vec<_>>(),
        vec![16, 32, 64]
    );

    // one forward pass: 3 x 256 x 256 output and per-resolution
    // cross-attention maps of shape [N, heads, C, H, W]
    let sample = models.generate(&pair.mask, &styles, Some(&emb)).unwrap();
    assert_eq!(sample.image.shape(), &[1, 3, 256, 256]);
    assert_eq!(sample.attention_stack.len(), cfg.block_widths.len());
    for (i, maps) in sample.attention_stack.iter().enumerate() {
        let r = 16usize << i;
        let heads = AttentionConfig::for_dim(cfg.block_widths[i]).unwrap().num_heads;
        assert_eq!(maps.shape(), &[1, heads, 19, r, r], "block {i}");
    }
}
