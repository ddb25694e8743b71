//! Token bitstream: the on-disk compressed form, plus the token-rate and
//! bitrate arithmetic connecting model configuration to bandwidth.
//!
//! Layout (little-endian): magic "WVTK" (4), version u8, sample_rate u32,
//! hop u16, codebook_size u32, frame count u64, then one u16 per index.
//! A 75-frame stream is 23 + 150 bytes.

use std::io::{Read, Write};
use std::path::Path;

use crate::dsp::AudioBuffer;
use crate::error::{BitstreamError, Error, Result};
use crate::model::Codec;

pub const MAGIC: [u8; 4] = *b"WVTK";
pub const VERSION: u8 = 1;
/// u16 indices cap the codebook at 2^16 entries.
pub const MAX_CODEBOOK: u32 = 65536;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub sample_rate: u32,
    /// Total encoder stride, i.e. samples per token.
    pub hop: u16,
    pub codebook_size: u32,
    pub indices: Vec<u32>,
}

impl TokenStream {
    pub fn new(sample_rate: u32, hop: u16, codebook_size: u32, indices: Vec<u32>) -> Result<Self> {
        if codebook_size > MAX_CODEBOOK {
            return Err(BitstreamError::CodebookTooLarge(codebook_size).into());
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= codebook_size) {
            return Err(BitstreamError::IndexOutOfRange { index: bad, codebook_size }.into());
        }
        Ok(Self { sample_rate, hop, codebook_size, indices })
    }

    pub fn num_frames(&self) -> usize {
        self.indices.len()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.indices.len() as f64 * self.hop as f64 / self.sample_rate as f64
    }

    pub fn token_rate(&self) -> f64 {
        token_rate(self.sample_rate, self.hop as usize)
    }

    pub fn bitrate_kbps(&self) -> Result<f64> {
        bitrate(self.token_rate(), self.codebook_size)
    }
}

/// Tokens per second: sample_rate / total_stride (rational in general).
pub fn token_rate(sample_rate: u32, total_stride: usize) -> f64 {
    assert!(sample_rate > 0 && total_stride > 0);
    sample_rate as f64 / total_stride as f64
}

/// Bandwidth in kbps: token_rate * log2(V) / 1000.
pub fn bitrate(token_rate: f64, codebook_size: u32) -> Result<f64> {
    if codebook_size < 2 {
        return Err(Error::Config(format!(
            "bitrate needs a codebook of at least 2 entries, got {codebook_size}"
        )));
    }
    Ok(token_rate * (codebook_size as f64).log2() / 1000.0)
}

pub fn write_tokens_to(stream: &TokenStream, mut w: impl Write) -> Result<()> {
    if stream.codebook_size > MAX_CODEBOOK {
        return Err(BitstreamError::CodebookTooLarge(stream.codebook_size).into());
    }
    w.write_all(&MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&stream.sample_rate.to_le_bytes())?;
    w.write_all(&stream.hop.to_le_bytes())?;
    w.write_all(&stream.codebook_size.to_le_bytes())?;
    w.write_all(&(stream.indices.len() as u64).to_le_bytes())?;
    for &i in &stream.indices {
        if i >= stream.codebook_size {
            return Err(BitstreamError::IndexOutOfRange {
                index: i,
                codebook_size: stream.codebook_size,
            }
            .into());
        }
        w.write_all(&(i as u16).to_le_bytes())?;
    }
    Ok(())
}

pub fn write_tokens(stream: &TokenStream, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut buf = std::io::BufWriter::new(file);
    write_tokens_to(stream, &mut buf)?;
    buf.flush()?;
    Ok(())
}

pub fn read_tokens_from(mut r: impl Read) -> Result<TokenStream> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut magic, 4)?;
    if magic != MAGIC {
        return Err(BitstreamError::BadMagic(magic).into());
    }
    let mut version = [0u8; 1];
    read_exact_or_truncated(&mut r, &mut version, 1)?;
    if version[0] != VERSION {
        return Err(BitstreamError::UnsupportedVersion(version[0]).into());
    }
    let mut u32b = [0u8; 4];
    let mut u16b = [0u8; 2];
    let mut u64b = [0u8; 8];
    read_exact_or_truncated(&mut r, &mut u32b, 4)?;
    let sample_rate = u32::from_le_bytes(u32b);
    read_exact_or_truncated(&mut r, &mut u16b, 2)?;
    let hop = u16::from_le_bytes(u16b);
    read_exact_or_truncated(&mut r, &mut u32b, 4)?;
    let codebook_size = u32::from_le_bytes(u32b);
    read_exact_or_truncated(&mut r, &mut u64b, 8)?;
    let frames = u64::from_le_bytes(u64b) as usize;

    let mut payload = vec![0u8; frames * 2];
    let got = read_up_to(&mut r, &mut payload)?;
    if got != frames * 2 {
        return Err(BitstreamError::Truncated { expected: frames * 2, got }.into());
    }
    let mut indices = Vec::with_capacity(frames);
    for chunk in payload.chunks_exact(2) {
        let i = u16::from_le_bytes([chunk[0], chunk[1]]) as u32;
        if i >= codebook_size {
            return Err(BitstreamError::IndexOutOfRange { index: i, codebook_size }.into());
        }
        indices.push(i);
    }
    Ok(TokenStream { sample_rate, hop, codebook_size, indices })
}

pub fn read_tokens(path: impl AsRef<Path>) -> Result<TokenStream> {
    let file = std::fs::File::open(path)?;
    read_tokens_from(std::io::BufReader::new(file))
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8], expected: usize) -> Result<()> {
    let got = read_up_to(r, buf)?;
    if got != expected {
        return Err(BitstreamError::Truncated { expected, got }.into());
    }
    Ok(())
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    Ok(filled)
}

/// Encodes a waveform through the model into a token stream.
pub fn encode_audio(audio: &AudioBuffer, codec: &Codec) -> Result<TokenStream> {
    if audio.is_empty() {
        return Err(Error::EmptyInput("encode"));
    }
    let (_, q) = codec.encode_audio(audio)?;
    TokenStream::new(
        codec.config.sample_rate,
        codec.config.total_stride() as u16,
        codec.config.vq.codebook_size as u32,
        q.indices,
    )
}

/// Reads a wav file (resampling on ingest) and encodes it.
pub fn encode_file(path: impl AsRef<Path>, codec: &Codec) -> Result<TokenStream> {
    let audio = crate::dsp::read_wav(path, codec.config.sample_rate)?;
    encode_audio(&audio, codec)
}

/// Decodes a token stream through the model; the header must match the
/// model's quantizer size, stride and sample rate.
pub fn decode_stream(stream: &TokenStream, codec: &Codec) -> Result<AudioBuffer> {
    let want_v = codec.config.vq.codebook_size as u32;
    if stream.codebook_size != want_v {
        return Err(BitstreamError::HeaderMismatch(format!(
            "stream codebook size {} vs model {want_v}",
            stream.codebook_size
        ))
        .into());
    }
    let want_hop = codec.config.total_stride() as u16;
    if stream.hop != want_hop {
        return Err(BitstreamError::HeaderMismatch(format!(
            "stream hop {} vs model stride {want_hop}",
            stream.hop
        ))
        .into());
    }
    if stream.sample_rate != codec.config.sample_rate {
        return Err(BitstreamError::HeaderMismatch(format!(
            "stream sample rate {} vs model {}",
            stream.sample_rate, codec.config.sample_rate
        ))
        .into());
    }
    codec.decode_indices(&stream.indices)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_rate_paper_points() {
        assert_eq!(token_rate(24000, 320), 75.0);
        assert_eq!(token_rate(24000, 600), 40.0);
        assert_eq!(token_rate(24000, 24000), 1.0);
        // non-divisible pairs come out rational
        assert!((token_rate(22050, 320) - 68.90625).abs() < 1e-12);
    }

    #[test]
    fn bitrate_paper_points() {
        assert_eq!(bitrate(75.0, 4096).unwrap(), 0.9);
        assert_eq!(bitrate(40.0, 4096).unwrap(), 0.48);
        assert_eq!(bitrate(1.0, 2).unwrap(), 0.001);
        assert!(bitrate(75.0, 1).is_err());
    }

    #[test]
    fn header_is_23_bytes_and_sizes_add_up() {
        let stream = TokenStream::new(24000, 320, 4096, vec![7; 75]).unwrap();
        let mut buf = Vec::new();
        write_tokens_to(&stream, &mut buf).unwrap();
        assert_eq!(buf.len(), 23 + 150);
    }

    #[test]
    fn round_trip_identity() {
        let stream = TokenStream::new(24000, 320, 4096, vec![0, 1, 4095, 17, 2048]).unwrap();
        let mut buf = Vec::new();
        write_tokens_to(&stream, &mut buf).unwrap();
        let back = read_tokens_from(buf.as_slice()).unwrap();
        assert_eq!(stream, back);
    }

    #[test]
    fn bad_magic_detected() {
        let stream = TokenStream::new(24000, 320, 64, vec![1, 2]).unwrap();
        let mut buf = Vec::new();
        write_tokens_to(&stream, &mut buf).unwrap();
        buf[0] = b'X';
        match read_tokens_from(buf.as_slice()) {
            Err(Error::Bitstream(BitstreamError::BadMagic(_))) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn bad_version_detected() {
        let stream = TokenStream::new(24000, 320, 64, vec![1]).unwrap();
        let mut buf = Vec::new();
        write_tokens_to(&stream, &mut buf).unwrap();
        buf[4] = 9;
        match read_tokens_from(buf.as_slice()) {
            Err(Error::Bitstream(BitstreamError::UnsupportedVersion(9))) => {}
            other => panic!("expected UnsupportedVersion, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_detected() {
        let stream = TokenStream::new(24000, 320, 64, vec![1, 2, 3, 4]).unwrap();
        let mut buf = Vec::new();
        write_tokens_to(&stream, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        match read_tokens_from(buf.as_slice()) {
            Err(Error::Bitstream(BitstreamError::Truncated { expected: 8, got: 5 })) => {}
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_index_detected() {
        let stream = TokenStream::new(24000, 320, 4096, vec![1, 2, 3]).unwrap();
        let mut buf = Vec::new();
        write_tokens_to(&stream, &mut buf).unwrap();
        // overwrite the second index with 9999
        let pos = 23 + 2;
        buf[pos..pos + 2].copy_from_slice(&9999u16.to_le_bytes());
        match read_tokens_from(buf.as_slice()) {
            Err(Error::Bitstream(BitstreamError::IndexOutOfRange {
                index: 9999,
                codebook_size: 4096,
            })) => {}
            other => panic!("expected IndexOutOfRange, got {other:?}"),
        }
    }

    #[test]
    fn oversized_codebook_rejected() {
        assert!(matches!(
            TokenStream::new(24000, 320, 70000, vec![]),
            Err(Error::Bitstream(BitstreamError::CodebookTooLarge(70000)))
        ));
    }

    #[test]
    fn stream_stats() {
        let stream = TokenStream::new(24000, 320, 4096, vec![0; 150]).unwrap();
        assert_eq!(stream.token_rate(), 75.0);
        assert_eq!(stream.bitrate_kbps().unwrap(), 0.9);
        assert_eq!(stream.duration_seconds(), 2.0);
    }
}
