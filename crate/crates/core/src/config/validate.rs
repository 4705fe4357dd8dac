use std::fmt;

use serde::Serialize;

use super::spec::{ArchKind, ArchSpec, HeadSpec, StageSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{tag}: {}", self.message)
    }
}

pub fn has_errors(diags: &[Diagnostic]) -> bool {
    diags.iter().any(|d| d.severity == Severity::Error)
}

struct Sink(Vec<Diagnostic>);

impl Sink {
    fn error(&mut self, message: String) {
        self.0.push(Diagnostic { severity: Severity::Error, message });
    }

    fn warn(&mut self, message: String) {
        self.0.push(Diagnostic { severity: Severity::Warning, message });
    }
}

fn check_stage(out: &mut Sink, label: &str, s: &StageSpec, conditioned: bool) {
    if s.blocks.is_empty() {
        out.error(format!("{label}: empty stage"));
    }
    if s.out_channels == 0 {
        out.error(format!("{label}: out_channels must be positive"));
    }
    if !(s.entry_stride == 1 || s.entry_stride == 2) {
        out.error(format!("{label}: entry_stride must be 1 or 2, got {}", s.entry_stride));
    }
    if s.blocks.iter().any(|b| b.is_conditioned() != conditioned) {
        let what = if conditioned { "plain C/T blocks inside a UNet" } else { "conditioned blocks outside a UNet" };
        out.error(format!("{label}: {what}"));
    }
    if s.has_attention() {
        match s.num_heads {
            None => out.error(format!("{label}: T blocks without a head count")),
            Some(0) => out.error(format!("{label}: head count must be positive")),
            Some(h) if s.out_channels % h != 0 => out.error(format!(
                "{label}: head divisibility: {} channels not divisible by {h} heads",
                s.out_channels
            )),
            _ => {}
        }
    }
}

fn t_before_c(s: &StageSpec) -> bool {
    s.blocks.windows(2).any(|w| w[0].is_attention() && w[1].is_conv())
}

/// Checks structural invariants (errors) and design principles (warnings).
/// Never fails; problems are reported as diagnostics.
pub fn validate(spec: &ArchSpec) -> Vec<Diagnostic> {
    let mut out = Sink(Vec::new());
    let unet = spec.kind == ArchKind::Unet;
    if spec.input_channels == 0 {
        out.error("input_channels must be positive".into());
    }
    if !(0.0..1.0).contains(&spec.stochastic_depth) {
        out.error(format!("stochastic_depth must lie in [0, 1), got {}", spec.stochastic_depth));
    }
    if spec.stem.out_channels == 0 || spec.stem.convs == 0 {
        out.error("stem needs positive channels and at least one conv".into());
    }
    if !(spec.stem.stride == 1 || spec.stem.stride == 2) {
        out.error(format!("stem stride must be 1 or 2, got {}", spec.stem.stride));
    }
    if spec.stages.is_empty() {
        out.error("no stages".into());
    }
    for (i, s) in spec.stages.iter().enumerate() {
        check_stage(&mut out, &format!("stage {i}"), s, unet);
        if t_before_c(s) {
            out.warn(format!("stage {i}: a transformer block precedes a convolution block"));
        }
    }
    match (&spec.head, spec.kind) {
        (HeadSpec::Classifier(h), ArchKind::Classifier) => {
            if spec.stages.len() != 4 {
                out.warn(format!("classifier has {} stages; the reference family uses 4", spec.stages.len()));
            }
            if spec.stages.first().is_some_and(|s| s.has_attention()) {
                out.warn("transformer in first stage".into());
            }
            if h.embed_dim == 0 || h.num_classes == 0 || h.image_size == 0 {
                out.error("classifier head needs positive embed_dim, num_classes and image_size".into());
            }
            if !spec.up_stages.is_empty() {
                out.error("classifier specs cannot carry up_stages".into());
            }
        }
        (HeadSpec::Unet(h), ArchKind::Unet) => {
            if h.middle.is_empty() {
                out.error("UNet middle block is empty".into());
            }
            if let Some(last) = spec.stages.last() {
                let mid = StageSpec::new(h.middle.clone(), last.out_channels, 1, last.num_heads);
                check_stage(&mut out, "middle", &mid, true);
            }
            if h.context_dim == 0 || h.time_embed_dim == 0 || h.context_len == 0 {
                out.error("UNet head needs positive context_dim, context_len and time_embed_dim".into());
            }
            if h.adapter_heads == 0 || h.context_dim % h.adapter_heads != 0 {
                out.error(format!(
                    "head divisibility: context dim {} not divisible by {} adapter heads",
                    h.context_dim, h.adapter_heads
                ));
            }
            if h.rope {
                for (i, s) in spec.stages.iter().enumerate() {
                    if let Some(heads) = s.num_heads.filter(|&n| n > 0) {
                        if s.has_attention() && (s.out_channels / heads) % 4 != 0 {
                            out.error(format!("stage {i}: RoPE needs a head dim divisible by 4"));
                        }
                    }
                }
            }
            for (i, s) in spec.stages.iter().enumerate() {
                if i == 0 && s.entry_stride != 1 {
                    out.error("UNet stage 0 must keep the input resolution (entry_stride 1)".into());
                }
            }
            let n = spec.stages.len();
            if spec.up_stages.len() != n {
                out.error(format!("mirror violation: {} Down stages but {} Up stages", n, spec.up_stages.len()));
            } else {
                for (i, up) in spec.up_stages.iter().enumerate() {
                    let down = &spec.stages[n - 1 - i];
                    check_stage(&mut out, &format!("up stage {i}"), up, true);
                    let reversed: Vec<_> = down.blocks.iter().rev().copied().collect();
                    if up.out_channels != down.out_channels
                        || up.blocks != reversed
                        || up.num_heads != down.num_heads
                        || up.entry_stride != down.entry_stride
                    {
                        out.error(format!(
                            "mirror violation: up stage {i} does not reflect down stage {}",
                            n - 1 - i
                        ));
                    }
                }
            }
        }
        _ => out.error("head type does not match kind".into()),
    }
    out.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::build_preset;

    #[test]
    fn c1_is_clean() {
        assert!(validate(&build_preset("c1").unwrap()).is_empty());
    }

    #[test]
    fn t4_warns_first_stage() {
        let d = validate(&build_preset("t4").unwrap());
        assert!(!has_errors(&d));
        assert!(d.iter().any(|d| d.message.contains("transformer in first stage")));
    }

    #[test]
    fn mirror_violation() {
        let mut s = build_preset("unet-class-cond").unwrap();
        s.up_stages[0].out_channels = 320;
        let d = validate(&s);
        assert!(d.iter().any(|d| d.severity == Severity::Error && d.message.contains("mirror violation")));
    }

    #[test]
    fn head_divisibility() {
        let mut s = build_preset("ascan-t").unwrap();
        s.stages[3].num_heads = Some(7);
        assert!(validate(&s).iter().any(|d| d.message.contains("head divisibility")));
    }
}
