//! Body transport: reading bodies under a framing decision, re-encoding
//! chunked streams, and carrying a hop's byte count inside the stream itself.
//!
//! When a hop forwards a chunked body it cannot put the count in a header —
//! the count is only known after the last chunk. Instead the count rides as
//! the final data chunk, `Length: <n>`, injected just before the terminal
//! chunk. The next hop holds back any chunk small enough to be that record
//! until it knows whether the terminal chunk follows, then strips the record
//! and checks it against the bytes it actually relayed. Chunk boundaries make
//! the record unambiguous; payload bytes are never scanned or rewritten.

use std::io::{self, BufRead, Write};

use crate::wire::FramingDecision;

/// Largest payload slice a reader yields in one event.
pub const READ_SLICE_BYTES: usize = 64 * 1024;
/// Cap for [`buffer_body`].
pub const MAX_BUFFERED_BODY_BYTES: usize = 16 * 1024 * 1024;
/// Prefix of the in-stream length record.
pub const LENGTH_RECORD_PREFIX: &[u8] = b"Length: ";
/// Longest possible record: the prefix plus the 20 digits of u64::MAX.
pub const MAX_LENGTH_RECORD_BYTES: usize = LENGTH_RECORD_PREFIX.len() + 20;

const MAX_CHUNK_SIZE_LINE_BYTES: usize = 1024;
const MAX_TRAILER_BYTES: usize = 16 * 1024;

/// Body framing violation while reading.
#[derive(Debug, thiserror::Error)]
pub enum FramingError {
    #[error("body read: {0}")]
    Io(#[from] io::Error),
    #[error("malformed chunk size line")]
    BadChunkSize,
    #[error("chunk not followed by CRLF")]
    MissingChunkDelimiter,
    #[error("malformed trailer line")]
    MalformedTrailer,
    #[error("trailer section too large")]
    TrailerTooLarge,
    #[error("buffered body exceeds {MAX_BUFFERED_BODY_BYTES} bytes")]
    BodyTooLarge,
}

/// One step of body progress.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BodyEvent {
    /// A payload slice. `end_of_chunk` is true when this slice completes a
    /// structural unit: a whole chunk in chunked framing, or the final slice
    /// of a Content-Length body. Slices never exceed [`READ_SLICE_BYTES`].
    Data { bytes: Vec<u8>, end_of_chunk: bool },
    /// Body complete. For chunked framing the terminal chunk and any trailers
    /// have been consumed (trailers are discarded, never acted on).
    End,
}

enum ReadState {
    Done,
    Counted { remaining: u64 },
    ChunkSize,
    InChunk { remaining: u64 },
}

/// Incremental body reader over a buffered source, driven by the framing
/// decision some personality already made. Yields bounded slices so callers
/// can relay arbitrarily large bodies in constant memory.
pub struct BodyReader<R> {
    src: R,
    state: ReadState,
}

impl<R: BufRead> BodyReader<R> {
    pub fn new(src: R, framing: FramingDecision) -> Self {
        let state = match framing {
            FramingDecision::NoBody | FramingDecision::ContentLength(0) => ReadState::Done,
            FramingDecision::ContentLength(n) => ReadState::Counted { remaining: n },
            FramingDecision::Chunked => ReadState::ChunkSize,
        };
        BodyReader { src, state }
    }

    pub fn into_inner(self) -> R {
        self.src
    }

    /// Peek at the underlying source (e.g. to check whether buffered input
    /// remains before deciding to flush a downstream writer).
    pub fn source(&self) -> &R {
        &self.src
    }

    /// Next event. After `End`, keeps returning `End`.
    pub fn next_event(&mut self) -> Result<BodyEvent, FramingError> {
        loop {
            match self.state {
                ReadState::Done => return Ok(BodyEvent::End),
                ReadState::Counted { remaining } => {
                    let take = remaining.min(READ_SLICE_BYTES as u64) as usize;
                    let mut bytes = vec![0u8; take];
                    self.src.read_exact(&mut bytes)?;
                    let left = remaining - take as u64;
                    self.state = if left == 0 {
                        ReadState::Done
                    } else {
                        ReadState::Counted { remaining: left }
                    };
                    return Ok(BodyEvent::Data { bytes, end_of_chunk: left == 0 });
                }
                ReadState::ChunkSize => {
                    let size = self.read_chunk_size()?;
                    if size == 0 {
                        self.read_trailers()?;
                        self.state = ReadState::Done;
                        return Ok(BodyEvent::End);
                    }
                    self.state = ReadState::InChunk { remaining: size };
                }
                ReadState::InChunk { remaining } => {
                    let take = remaining.min(READ_SLICE_BYTES as u64) as usize;
                    let mut bytes = vec![0u8; take];
                    self.src.read_exact(&mut bytes)?;
                    let left = remaining - take as u64;
                    if left == 0 {
                        let mut crlf = [0u8; 2];
                        self.src.read_exact(&mut crlf)?;
                        if crlf != *b"\r\n" {
                            return Err(FramingError::MissingChunkDelimiter);
                        }
                        self.state = ReadState::ChunkSize;
                        return Ok(BodyEvent::Data { bytes, end_of_chunk: true });
                    }
                    self.state = ReadState::InChunk { remaining: left };
                    return Ok(BodyEvent::Data { bytes, end_of_chunk: false });
                }
            }
        }
    }

    fn read_line(&mut self, cap: usize, overflow: FramingError) -> Result<Vec<u8>, FramingError> {
        let mut line = Vec::new();
        loop {
            let mut byte = [0u8; 1];
            self.src.read_exact(&mut byte)?;
            if byte[0] == b'\n' {
                if line.last() == Some(&b'\r') {
                    line.pop();
                    return Ok(line);
                }
                return Err(FramingError::MissingChunkDelimiter);
            }
            line.push(byte[0]);
            if line.len() > cap {
                return Err(overflow);
            }
        }
    }

    fn read_chunk_size(&mut self) -> Result<u64, FramingError> {
        let line = self.read_line(MAX_CHUNK_SIZE_LINE_BYTES, FramingError::BadChunkSize)?;
        // Chunk extensions after ';' are tolerated and ignored.
        let hex = match line.iter().position(|&b| b == b';') {
            Some(i) => &line[..i],
            None => &line[..],
        };
        if hex.is_empty() || hex.len() > 16 || !hex.iter().all(|b| b.is_ascii_hexdigit()) {
            return Err(FramingError::BadChunkSize);
        }
        u64::from_str_radix(std::str::from_utf8(hex).unwrap(), 16)
            .map_err(|_| FramingError::BadChunkSize)
    }

    fn read_trailers(&mut self) -> Result<(), FramingError> {
        let mut total = 0usize;
        loop {
            let line = self.read_line(MAX_TRAILER_BYTES, FramingError::TrailerTooLarge)?;
            if line.is_empty() {
                return Ok(());
            }
            total += line.len();
            if total > MAX_TRAILER_BYTES {
                return Err(FramingError::TrailerTooLarge);
            }
            // Parsed for well-formedness, then dropped: nothing downstream of
            // this reader ever sees a trailer.
            if !line.contains(&b':') {
                return Err(FramingError::MalformedTrailer);
            }
        }
    }
}

/// Running payload byte count.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StreamCounter(u64);

impl StreamCounter {
    pub fn new() -> Self {
        StreamCounter(0)
    }

    pub fn add(&mut self, bytes: usize) {
        self.0 += bytes as u64;
    }

    pub fn get(&self) -> u64 {
        self.0
    }
}

/// Chunk-encoding writer. Payload slices become chunks one-for-one, so a
/// small chunk a peer sent stays a distinct chunk at the next hop.
pub struct ChunkedWriter<W: Write> {
    inner: W,
}

impl<W: Write> ChunkedWriter<W> {
    pub fn new(inner: W) -> Self {
        ChunkedWriter { inner }
    }

    /// Write one chunk. Empty input writes nothing: a zero-size chunk would
    /// terminate the body.
    pub fn write_chunk(&mut self, data: &[u8]) -> io::Result<()> {
        if data.is_empty() {
            return Ok(());
        }
        write!(self.inner, "{:x}\r\n", data.len())?;
        self.inner.write_all(data)?;
        self.inner.write_all(b"\r\n")
    }

    /// Flush the underlying writer without ending the stream. Useful when
    /// the input has gone quiet and buffered chunks should move now.
    pub fn flush_inner(&mut self) -> io::Result<()> {
        self.inner.flush()
    }

    /// Terminate the stream without a length record (plain chunked body).
    pub fn finish(mut self) -> io::Result<W> {
        self.inner.write_all(b"0\r\n\r\n")?;
        self.inner.flush()?;
        Ok(self.inner)
    }

    /// Inject the length record as the final data chunk, then terminate.
    /// `payload_count` is the number of payload bytes written via
    /// [`Self::write_chunk`], which the next hop will verify.
    pub fn finish_with_record(mut self, payload_count: u64) -> io::Result<W> {
        self.write_chunk(&length_record_payload(payload_count))?;
        self.inner.write_all(b"0\r\n\r\n")?;
        self.inner.flush()?;
        Ok(self.inner)
    }

    /// Abandon the stream with no terminal chunk. The peer sees a framing
    /// violation instead of a cleanly-ended body, so a partially relayed
    /// request can never be mistaken for a complete one.
    pub fn abort(self) -> W {
        self.inner
    }
}

/// The record payload: `Length: ` plus the canonical decimal count.
pub fn length_record_payload(count: u64) -> Vec<u8> {
    let mut out = LENGTH_RECORD_PREFIX.to_vec();
    out.extend_from_slice(count.to_string().as_bytes());
    out
}

/// Strict inverse of [`length_record_payload`]: exact prefix, digits only,
/// no leading zeros, within u64 range.
pub fn parse_length_record(payload: &[u8]) -> Option<u64> {
    let digits = payload.strip_prefix(LENGTH_RECORD_PREFIX)?;
    if digits.is_empty()
        || digits.len() > 20
        || !digits.iter().all(|b| b.is_ascii_digit())
        || (digits.len() > 1 && digits[0] == b'0')
    {
        return None;
    }
    std::str::from_utf8(digits).ok()?.parse().ok()
}

/// The stream carried no length record where one was promised, or the
/// candidate chunk was not a well-formed record.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StripError {
    #[error("stream ended without a length record chunk")]
    MissingLengthChunk,
    #[error("final chunk is not a well-formed length record")]
    MalformedLengthPayload,
}

/// Count declared by a stripped record alongside the payload bytes actually
/// seen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StripResult {
    pub declared: u64,
    pub counted: u64,
}

/// Removes the length record from a chunk stream while passing payload
/// through. Only a complete chunk no larger than the longest possible record
/// is ever held back, so payload flow is delayed by at most one small chunk
/// and large chunks stream immediately.
#[derive(Debug, Default)]
pub struct LengthStripper {
    held: Option<Vec<u8>>,
    mid_chunk: bool,
    counted: u64,
}

impl LengthStripper {
    pub fn new() -> Self {
        Self::default()
    }

    /// Feed one event from a chunked [`BodyReader`]. Returns payload slices
    /// to forward now (zero, one, or two) and, on `End`, the strip result to
    /// verify with [`verify_stream_length`].
    pub fn on_event(
        &mut self,
        ev: BodyEvent,
    ) -> Result<(Vec<Vec<u8>>, Option<StripResult>), StripError> {
        match ev {
            BodyEvent::Data { bytes, end_of_chunk } => {
                let whole_small_chunk =
                    !self.mid_chunk && end_of_chunk && bytes.len() <= MAX_LENGTH_RECORD_BYTES;
                self.mid_chunk = !end_of_chunk;
                let mut out = Vec::with_capacity(2);
                if let Some(prev) = self.held.take() {
                    self.counted += prev.len() as u64;
                    out.push(prev);
                }
                if whole_small_chunk {
                    self.held = Some(bytes);
                } else {
                    self.counted += bytes.len() as u64;
                    out.push(bytes);
                }
                Ok((out, None))
            }
            BodyEvent::End => {
                let record = self.held.take().ok_or(StripError::MissingLengthChunk)?;
                let declared =
                    parse_length_record(&record).ok_or(StripError::MalformedLengthPayload)?;
                Ok((
                    Vec::new(),
                    Some(StripResult { declared, counted: self.counted }),
                ))
            }
        }
    }
}

/// The end-of-body check: the count the peer declared must equal the count
/// observed on the wire.
pub fn verify_stream_length(declared: u64, counted: u64) -> bool {
    declared == counted
}

/// Drain a body into memory, up to [`MAX_BUFFERED_BODY_BYTES`].
pub fn buffer_body<R: BufRead>(reader: &mut BodyReader<R>) -> Result<Vec<u8>, FramingError> {
    let mut out = Vec::new();
    loop {
        match reader.next_event()? {
            BodyEvent::Data { bytes, .. } => {
                if out.len() + bytes.len() > MAX_BUFFERED_BODY_BYTES {
                    return Err(FramingError::BodyTooLarge);
                }
                out.extend_from_slice(&bytes);
            }
            BodyEvent::End => return Ok(out),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    fn read_all(framing: FramingDecision, input: &[u8]) -> Result<Vec<u8>, FramingError> {
        let mut r = BodyReader::new(Cursor::new(input.to_vec()), framing);
        let mut out = Vec::new();
        loop {
            match r.next_event()? {
                BodyEvent::Data { bytes, .. } => out.extend_from_slice(&bytes),
                BodyEvent::End => return Ok(out),
            }
        }
    }

    #[test]
    fn writer_produces_reference_chunk_encoding() {
        let mut w = ChunkedWriter::new(Vec::new());
        w.write_chunk(b"potato").unwrap();
        w.write_chunk(b"and").unwrap();
        w.write_chunk(b"eggs").unwrap();
        let bytes = w.finish().unwrap();
        assert_eq!(bytes, b"6\r\npotato\r\n3\r\nand\r\n4\r\neggs\r\n0\r\n\r\n".to_vec());
    }

    #[test]
    fn reader_decodes_reference_chunk_encoding() {
        let body = read_all(
            FramingDecision::Chunked,
            b"6\r\npotato\r\n3\r\nand\r\n4\r\neggs\r\n0\r\n\r\n",
        )
        .unwrap();
        assert_eq!(body, b"potatoandeggs");
        assert_eq!(body.len(), 13);
    }

    #[test]
    fn reader_handles_content_length_and_no_body() {
        assert_eq!(
            read_all(FramingDecision::ContentLength(13), b"potatoandeggsEXTRA").unwrap(),
            b"potatoandeggs"
        );
        assert_eq!(read_all(FramingDecision::NoBody, b"whatever").unwrap(), b"");
        assert!(matches!(
            read_all(FramingDecision::ContentLength(13), b"short"),
            Err(FramingError::Io(_))
        ));
    }

    #[test]
    fn chunk_extensions_tolerated_and_trailers_discarded() {
        let input = b"6;ext=1\r\npotato\r\n0\r\nX-Checksum: abc\r\n\r\n";
        assert_eq!(read_all(FramingDecision::Chunked, input).unwrap(), b"potato");
        // Uppercase hex sizes are valid on the wire.
        assert_eq!(
            read_all(FramingDecision::Chunked, b"A\r\n0123456789\r\n0\r\n\r\n").unwrap(),
            b"0123456789"
        );
    }

    #[test]
    fn framing_violations_rejected() {
        assert!(matches!(
            read_all(FramingDecision::Chunked, b"zz\r\nxx\r\n0\r\n\r\n"),
            Err(FramingError::BadChunkSize)
        ));
        assert!(matches!(
            read_all(FramingDecision::Chunked, b"3\r\nabcXX0\r\n\r\n"),
            Err(FramingError::MissingChunkDelimiter)
        ));
        assert!(matches!(
            read_all(FramingDecision::Chunked, b"0\r\nnot a trailer\r\n\r\n"),
            Err(FramingError::MalformedTrailer)
        ));
        // Truncated mid-body.
        assert!(matches!(
            read_all(FramingDecision::Chunked, b"6\r\npot"),
            Err(FramingError::Io(_))
        ));
    }

    #[test]
    fn large_chunks_stream_in_bounded_slices() {
        let payload = vec![0xabu8; 200 * 1024];
        let mut w = ChunkedWriter::new(Vec::new());
        w.write_chunk(&payload).unwrap();
        let encoded = w.finish().unwrap();

        let mut r = BodyReader::new(Cursor::new(encoded), FramingDecision::Chunked);
        let mut slices = Vec::new();
        loop {
            match r.next_event().unwrap() {
                BodyEvent::Data { bytes, end_of_chunk } => {
                    assert!(bytes.len() <= READ_SLICE_BYTES);
                    slices.push((bytes.len(), end_of_chunk));
                }
                BodyEvent::End => break,
            }
        }
        assert!(slices.len() > 1);
        assert!(slices[..slices.len() - 1].iter().all(|&(_, end)| !end));
        assert!(slices.last().unwrap().1);
        assert_eq!(slices.iter().map(|&(n, _)| n).sum::<usize>(), payload.len());
    }

    #[test]
    fn record_payload_round_trips_and_grammar_is_strict() {
        assert_eq!(length_record_payload(0), b"Length: 0");
        assert_eq!(length_record_payload(13), b"Length: 13");
        assert_eq!(parse_length_record(b"Length: 13"), Some(13));
        assert_eq!(parse_length_record(b"Length: 0"), Some(0));
        assert_eq!(
            parse_length_record(format!("Length: {}", u64::MAX).as_bytes()),
            Some(u64::MAX)
        );
        for bad in [
            &b"Length: 007"[..],   // leading zeros
            b"Length:13",          // missing space
            b"length: 13",         // case
            b"Length: 13x",        // trailing junk
            b"Length: ",           // no digits
            b"Length: 18446744073709551616", // overflow
            b"",
            b"potato",
        ] {
            assert_eq!(parse_length_record(bad), None, "accepted {bad:?}");
        }
    }

    fn strip_from(encoded: &[u8]) -> Result<(Vec<u8>, StripResult), StripError> {
        let mut r = BodyReader::new(Cursor::new(encoded.to_vec()), FramingDecision::Chunked);
        let mut stripper = LengthStripper::new();
        let mut payload = Vec::new();
        loop {
            let ev = r.next_event().expect("well-formed chunk stream");
            let (slices, done) = stripper.on_event(ev)?;
            for s in slices {
                payload.extend_from_slice(&s);
            }
            if let Some(result) = done {
                return Ok((payload, result));
            }
        }
    }

    #[test]
    fn inject_then_strip_returns_payload_and_count() {
        let mut w = ChunkedWriter::new(Vec::new());
        w.write_chunk(b"potato").unwrap();
        w.write_chunk(b"and").unwrap();
        w.write_chunk(b"eggs").unwrap();
        let encoded = w.finish_with_record(13).unwrap();

        let (payload, result) = strip_from(&encoded).unwrap();
        assert_eq!(payload, b"potatoandeggs");
        assert_eq!(result, StripResult { declared: 13, counted: 13 });
        assert!(verify_stream_length(result.declared, result.counted));
    }

    #[test]
    fn empty_body_with_record_strips_to_nothing() {
        let w = ChunkedWriter::new(Vec::new());
        let encoded = w.finish_with_record(0).unwrap();
        assert_eq!(encoded, b"9\r\nLength: 0\r\n0\r\n\r\n");
        let (payload, result) = strip_from(&encoded).unwrap();
        assert!(payload.is_empty());
        assert_eq!(result, StripResult { declared: 0, counted: 0 });
    }

    #[test]
    fn record_sized_payload_chunk_is_not_mistaken_for_the_record() {
        // The last payload chunk looks exactly like a record; only the chunk
        // adjacent to the terminal chunk is treated as one.
        let mut w = ChunkedWriter::new(Vec::new());
        w.write_chunk(b"Length: 99").unwrap();
        let encoded = w.finish_with_record(10).unwrap();
        let (payload, result) = strip_from(&encoded).unwrap();
        assert_eq!(payload, b"Length: 99");
        assert_eq!(result, StripResult { declared: 10, counted: 10 });
    }

    #[test]
    fn missing_or_malformed_record_is_an_error() {
        let mut w = ChunkedWriter::new(Vec::new());
        w.write_chunk(b"data").unwrap();
        let plain = w.finish().unwrap();
        // "data" is held as a record candidate, then fails the grammar.
        assert_eq!(strip_from(&plain), Err(StripError::MalformedLengthPayload));

        let empty = ChunkedWriter::new(Vec::new()).finish().unwrap();
        assert_eq!(strip_from(&empty), Err(StripError::MissingLengthChunk));

        // A large final chunk cannot be a record at all.
        let mut w = ChunkedWriter::new(Vec::new());
        w.write_chunk(&[b'x'; 100]).unwrap();
        let big_last = w.finish().unwrap();
        assert_eq!(strip_from(&big_last), Err(StripError::MissingLengthChunk));
    }

    #[test]
    fn tampered_count_detected_at_verification() {
        let mut w = ChunkedWriter::new(Vec::new());
        w.write_chunk(b"potatoandeggs").unwrap();
        let encoded = w.finish_with_record(51).unwrap(); // lies about the count
        let (_, result) = strip_from(&encoded).unwrap();
        assert_eq!(result, StripResult { declared: 51, counted: 13 });
        assert!(!verify_stream_length(result.declared, result.counted));
    }

    #[test]
    fn buffer_body_caps_size() {
        let n = (MAX_BUFFERED_BODY_BYTES + 1) as u64;
        // A Content-Length reader over a repeating source.
        struct Zeros;
        impl std::io::Read for Zeros {
            fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
                buf.fill(0);
                Ok(buf.len())
            }
        }
        let mut r = BodyReader::new(std::io::BufReader::new(Zeros), FramingDecision::ContentLength(n));
        assert!(matches!(buffer_body(&mut r), Err(FramingError::BodyTooLarge)));
    }

    proptest! {
        // Chunk-encode at arbitrary split points, append the record, read it
        // all back: payload and count survive exactly.
        #[test]
        fn prop_inject_strip_is_inverse_of_encode(
            body in proptest::collection::vec(any::<u8>(), 0..2048),
            splits in proptest::collection::vec(any::<proptest::sample::Index>(), 0..8),
        ) {
            let mut cuts: Vec<usize> = splits.iter().map(|i| i.index(body.len() + 1)).collect();
            cuts.push(0);
            cuts.push(body.len());
            cuts.sort_unstable();
            cuts.dedup();

            let mut w = ChunkedWriter::new(Vec::new());
            for pair in cuts.windows(2) {
                w.write_chunk(&body[pair[0]..pair[1]]).unwrap();
            }
            let encoded = w.finish_with_record(body.len() as u64).unwrap();

            let (payload, result) = strip_from(&encoded).unwrap();
            prop_assert_eq!(&payload, &body);
            prop_assert_eq!(result.declared, body.len() as u64);
            prop_assert_eq!(result.counted, body.len() as u64);
        }

        // Without a record, writer and reader are transparent for any body
        // and any chunking.
        #[test]
        fn prop_plain_chunk_round_trip(
            body in proptest::collection::vec(any::<u8>(), 0..2048),
            splits in proptest::collection::vec(any::<proptest::sample::Index>(), 0..8),
        ) {
            let mut cuts: Vec<usize> = splits.iter().map(|i| i.index(body.len() + 1)).collect();
            cuts.push(0);
            cuts.push(body.len());
            cuts.sort_unstable();
            cuts.dedup();

            let mut w = ChunkedWriter::new(Vec::new());
            for pair in cuts.windows(2) {
                w.write_chunk(&body[pair[0]..pair[1]]).unwrap();
            }
            let encoded = w.finish().unwrap();
            prop_assert_eq!(read_all(FramingDecision::Chunked, &encoded).unwrap(), body);
        }
    }
}
