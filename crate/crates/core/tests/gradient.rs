use vfpt::backbone::BackboneConfig;
use vfpt::gradcheck::GradCheck;
use vfpt::prompt::{DimMode, Location, PromptConfig, TransformKind, Variant};
use vfpt::selftest::{random_backbone, tuned_gradient_check};

fn sampled() -> GradCheck {
    GradCheck {
        max_entries: Some(300),
        ..GradCheck::default()
    }
}

#[test]
fn desk_backbone_end_to_end_gradients() {
    let bb = random_backbone(BackboneConfig::default(), 21).unwrap();
    let cases = [
        PromptConfig::default(),
        PromptConfig {
            transform: TransformKind::Lll,
            ..PromptConfig::default()
        },
        PromptConfig {
            transform: TransformKind::Fll,
            location: Location::Random,
            ..PromptConfig::default()
        },
        PromptConfig {
            alpha: 1.0,
            dim_mode: DimMode::Hidden,
            variant: Variant::Shallow,
            ..PromptConfig::default()
        },
        PromptConfig {
            alpha: 0.3,
            location: Location::Append,
            depth_set: Some(vec![2, 5]),
            dim_mode: DimMode::Sequence,
            ..PromptConfig::default()
        },
    ];
    for pc in cases {
        let r = tuned_gradient_check(&bb, &pc, 2, &sampled(), 22).unwrap();
        assert!(r.max_rel_err < 1e-4 && r.checked > 0, "{pc:?}: {r:?}");
    }
}

#[test]
fn tiny_backbone_every_entry() {
    let bb = random_backbone(vfpt::selftest::tiny_backbone_config(), 23).unwrap();
    for transform in [TransformKind::Fft, TransformKind::Lll, TransformKind::None] {
        let pc = PromptConfig {
            length: 3,
            transform,
            ..PromptConfig::default()
        };
        let r = tuned_gradient_check(&bb, &pc, 3, &GradCheck::default(), 24).unwrap();
        assert!(r.max_rel_err < 1e-5, "{transform:?}: {r:?}");
    }
}
