//! Keypoint, lip-feature and subtitle ingestion, text cleaning, sample
//! filtering and synthetic corpora.

pub mod filter;
pub mod keypoints;
pub mod lip;
pub mod manifest;
pub mod subtitles;
pub mod synth;
pub mod text;

pub use filter::{admits, filter_samples, FilterConfig, SampleRecord, Split};
pub use keypoints::{
    decode_keypoints, encode_keypoints, normalize_keypoints, read_keypoints, write_keypoints,
    KeypointClip, NUM_JOINTS,
};
pub use lip::{read_lip, write_lip, LipClip};
pub use manifest::{read_manifest, read_vocab, write_manifest, IsolatedEntry, ManifestEntry};
pub use subtitles::{
    parse_srt, parse_subtitles, parse_vtt, write_srt, write_subtitles, write_vtt, Cue,
    SubtitleFormat, SubtitleTrack, TrackKind,
};
pub use synth::{SynthConfig, SynthCorpus, SynthVideo};
pub use text::clean_text;
