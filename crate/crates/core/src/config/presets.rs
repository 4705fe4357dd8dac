use super::dsl::parse_layout;
use super::spec::{
    mirror_stages, ArchKind, ArchSpec, ClassifierHead, HeadSpec, SkipMode, StageSpec, StemSpec, UnetHead,
    CLASSIFIER_HEAD_DIM,
};
use crate::error::{Error, Result};

pub const TINY_WIDTHS: [usize; 4] = [96, 192, 384, 768];
pub const LARGE_WIDTHS: [usize; 4] = [128, 256, 512, 1024];

/// Stage layouts of the configuration ablations.
pub const ABLATIONS: [(&str, &str); 15] = [
    ("c1", "CC-CCCT-CCTT-CTTT"),
    ("c2", "CC-CCCT-CCTT-CCTT"),
    ("c3", "CC-CCCT-CCTT-TTTT"),
    ("c4", "CC-CCCT-CCCC-TTTT"),
    ("c5", "CC-CCCT-CCCT-CCCT"),
    ("c6", "CC-CCCC-CCCC-TTTT"),
    ("c7", "CC-CCCC-CCTT-TTTT"),
    ("c8", "CC-CCCC-TTTT-TTTT"),
    ("c9", "CC-TTTT-TTTT-TTTT"),
    ("c10", "CC-CCTT-CCTT-CCTT"),
    ("t1", "CC-TCCC-CCTT-CTTT"),
    ("t2", "CC-CCCT-TTCC-CTTT"),
    ("t3", "CC-CCCT-CCTT-TTTC"),
    ("t4", "TT-CCCT-CCTT-CTTT"),
    ("t5", "TT-TTTC-TTCC-TTTC"),
];

pub const BASE_LAYOUT: &str = "CC-CCCCTT-CCCCCCCTTTTTTT-CTTT";

pub const PRESET_NAMES: [&str; 23] = [
    "ascan-t", "ascan-b", "ascan-l", "c1", "c2", "c3", "c4", "c5", "c6", "c7", "c8", "c9", "c10", "t1", "t2", "t3",
    "t4", "t5", "unet-class-cond", "unet-t2i", "toy-cls", "toy-unet", "toy-unet-img",
];

fn stages(layout: &str, widths: &[usize], strides: &[usize], head_dim: usize) -> Result<Vec<StageSpec>> {
    let layout = parse_layout(layout)?;
    if layout.len() != widths.len() || widths.len() != strides.len() {
        return Err(Error::Config(format!("{} stages for {} widths", layout.len(), widths.len())));
    }
    Ok(layout
        .into_iter()
        .zip(widths.iter().zip(strides))
        .map(|(blocks, (&c, &s))| {
            let heads = blocks.iter().any(|b| b.is_attention()).then(|| (c / head_dim).max(1));
            StageSpec::new(blocks, c, s, heads)
        })
        .collect())
}

#[allow(clippy::too_many_arguments)]
fn classifier(
    name: &str,
    layout: &str,
    widths: &[usize],
    stem: usize,
    embed: usize,
    stochastic_depth: f64,
) -> Result<ArchSpec> {
    Ok(ArchSpec {
        name: name.to_string(),
        kind: ArchKind::Classifier,
        input_channels: 3,
        stochastic_depth,
        stem: StemSpec { out_channels: stem, convs: 2, stride: 2 },
        stages: stages(layout, widths, &[2; 4], CLASSIFIER_HEAD_DIM)?,
        up_stages: Vec::new(),
        head: HeadSpec::Classifier(ClassifierHead { embed_dim: embed, num_classes: 1000, image_size: 224 }),
    })
}

#[allow(clippy::too_many_arguments)]
fn unet(
    name: &str,
    input_channels: usize,
    layout: &str,
    widths: &[usize],
    strides: &[usize],
    heads: &[usize],
    middle: &str,
    context_dim: usize,
    context_len: usize,
    adapter_heads: usize,
    latent_size: usize,
) -> Result<ArchSpec> {
    let mut down = stages(layout, widths, strides, 1)?;
    for (s, &h) in down.iter_mut().zip(heads) {
        s.num_heads = Some(h);
    }
    let middle = parse_layout(middle)?.concat();
    let spec = ArchSpec {
        name: name.to_string(),
        kind: ArchKind::Unet,
        input_channels,
        stochastic_depth: 0.0,
        stem: StemSpec { out_channels: widths[0], convs: 1, stride: 1 },
        up_stages: mirror_stages(&down),
        stages: down,
        head: HeadSpec::Unet(UnetHead {
            middle,
            skip: SkipMode::Concat,
            time_embed_dim: 4 * widths[0],
            context_dim,
            context_len,
            adapter_blocks: 2,
            adapter_heads,
            qk_norm: true,
            rope: true,
            latent_size,
        }),
    };
    Ok(spec.normalize())
}

/// Resolves a preset by name (case-insensitive).
pub fn build_preset(name: &str) -> Result<ArchSpec> {
    let key = name.to_ascii_lowercase();
    if let Some((_, layout)) = ABLATIONS.iter().find(|(n, _)| *n == key) {
        return classifier(&key, layout, &TINY_WIDTHS, 64, 512, 0.3);
    }
    match key.as_str() {
        "ascan-t" => classifier("ascan-t", "CC-CCCT-CCTT-CTTT", &TINY_WIDTHS, 64, 512, 0.3),
        "ascan-b" => classifier("ascan-b", BASE_LAYOUT, &TINY_WIDTHS, 64, 768, 0.4),
        "ascan-l" => classifier("ascan-l", BASE_LAYOUT, &LARGE_WIDTHS, 128, 1024, 0.5),
        "unet-class-cond" => unet(
            "unet-class-cond",
            4,
            "CC-CCCT-CCCCCCTTTTTT",
            &[160, 320, 640],
            &[1, 2, 2],
            &[5, 10, 20],
            "CTC",
            768,
            1,
            12,
            32,
        ),
        "unet-t2i" => unet(
            "unet-t2i",
            4,
            "CC-CCCCTT-CCCCCCCCTTTTTTTT",
            &[320, 640, 1280],
            &[1, 2, 2],
            &[5, 10, 20],
            "CTC",
            4096,
            77,
            32,
            128,
        ),
        "toy-cls" => Ok(ArchSpec {
            name: "toy-cls".into(),
            kind: ArchKind::Classifier,
            input_channels: 3,
            stochastic_depth: 0.0,
            stem: StemSpec { out_channels: 8, convs: 1, stride: 1 },
            stages: stages("C-CT", &[16, 32], &[2, 2], 16)?,
            up_stages: Vec::new(),
            head: HeadSpec::Classifier(ClassifierHead { embed_dim: 32, num_classes: 2, image_size: 8 }),
        }),
        "toy-unet" => unet("toy-unet", 2, "C-CT", &[16, 32], &[1, 1], &[1, 2], "C", 8, 1, 1, 1),
        "toy-unet-img" => unet("toy-unet-img", 2, "C-CT", &[8, 16], &[1, 2], &[1, 2], "T", 8, 2, 1, 4),
        _ => Err(Error::Config(format!(
            "unknown preset `{name}`; known presets: {}",
            PRESET_NAMES.join(", ")
        ))),
    }
}
