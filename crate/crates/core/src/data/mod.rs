//! Audio and synthetic data: STFT analysis/resynthesis, silence trimming,
//! segmentation, manifests, spectrogram caching, and generators.

pub mod audio;
pub mod cache;
pub mod corpus;
pub mod manifest;
pub mod segment;
pub mod silence;
pub mod stft;
pub mod synth;

pub use audio::{normalize_peak, read_wav, write_wav};
pub use cache::{config_hash, read_cached, read_header, write_cached, CacheHeader};
pub use corpus::{
    load_split, load_waveform, preprocess_corpus, training_sequences, write_synthetic_corpus, PreparedItem,
    PreprocessConfig, PreprocessReport, SplitFractions,
};
pub use manifest::{DatasetManifest, ManifestHeader, ManifestRecord, Split};
pub use segment::{segment_sequences, Segment, SegmentReport};
pub use silence::{active_range, trim_silence, SilenceConfig};
pub use stft::{istft_overlap_add, stft_power, Spectrogram, Stft, StftConfig};
pub use synth::{spectral_radius, synth_lds_dataset, synth_speech_corpus, synth_utterance, LdsDataset, SpeechSynthConfig, Utterance};
