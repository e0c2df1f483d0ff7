//! Audio decoding and the log-mel front end.

pub mod filename;
pub mod mel;
pub mod subband;
pub mod wav;

pub use filename::{parse_dcase_filename, ClipName};
pub use mel::{hz_to_mel, logmel, mel_to_hz, FeatureMap, FrameParams, MelFilterbank, LOG_EPS};
pub use subband::{split_subspectrograms, SubBandSplit};
pub use wav::{decode_wav, decode_wav_bytes, encode_wav, write_wav, AudioClip, SampleFormat};
