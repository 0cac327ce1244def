//! Synthetic pose/illumination face corpus, image IO and split protocols.

mod corpus;
mod pnm;
mod synth;

pub use corpus::{
    generate_corpus, load_corpus, parse_file_name, sample_file_name, split, CorpusSpec,
    LabeledSample, Manifest, ManifestRow, Split, SplitProtocol, MANIFEST_FILE, MANIFEST_HEADER,
};
pub use pnm::{decode_pnm, encode_pnm, quantize, read_pnm, write_pnm};
pub use synth::{
    project, render, render_unclamped, IdentityTemplate, LightRoster, LightSpec, PoseRoster,
    PoseSpec, BACKGROUND_ALBEDO, OCCLUSION_YAW_DEG,
};
