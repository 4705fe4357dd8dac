//! Architecture specifications: the block-string language, structured
//! specs, presets, validation and TOML files.

mod dsl;
mod file;
mod presets;
mod spec;
mod validate;

pub use dsl::{classify_symmetry, parse_layout, render_layout, render_stage, BlockKind, Layout, Symmetry};
pub use file::{canonical_toml, load_spec, spec_from_toml, spec_hash};
pub use presets::{build_preset, ABLATIONS, BASE_LAYOUT, LARGE_WIDTHS, PRESET_NAMES, TINY_WIDTHS};
pub use spec::{
    mirror_stages, ArchKind, ArchSpec, ClassifierHead, HeadSpec, SkipMode, StageSpec, StemSpec, UnetHead,
    CLASSIFIER_HEAD_DIM,
};
pub use validate::{has_errors, validate, Diagnostic, Severity};
