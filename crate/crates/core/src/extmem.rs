//! External memory pool and stream primitives.
//!
//! Streams are created on the host and live in the shared pool. A core must
//! open a stream before it can move tokens down (read) or up (write); at most
//! one core holds a stream open at any time. Each stream keeps a single
//! cursor, shared by reads and writes, that survives close/open so another
//! core can resume where the previous owner stopped.
//!
//! The pool itself charges no cost and knows nothing about scratchpad
//! budgets; the runtime wraps these calls with both.

use thiserror::Error;

use crate::machine::MachineParams;

pub type StreamId = usize;
pub type CoreId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StreamError {
    #[error("external memory exhausted: {requested} words requested, {available} of {capacity} available")]
    CapacityExceeded {
        requested: usize,
        available: usize,
        capacity: usize,
    },
    #[error("token size must be at least one word")]
    EmptyToken,
    #[error("token of {token_size} words does not fit in a {local_words}-word scratchpad")]
    TokenTooLarge {
        token_size: usize,
        local_words: usize,
    },
    #[error("stream size {total} is not a positive multiple of token size {token_size}")]
    RaggedStream { total: usize, token_size: usize },
    #[error("initial data has {actual} words, expected {expected}")]
    InitialDataLength { expected: usize, actual: usize },
    #[error("unknown stream {0}")]
    UnknownStream(StreamId),
    #[error("stream busy: stream {stream} is already open on core {owner}")]
    Busy { stream: StreamId, owner: CoreId },
    #[error("invalid handle for stream {0} (closed or not owned by this core)")]
    InvalidHandle(StreamId),
    #[error("end of stream {stream}: cursor at {cursor} of {n_tokens} tokens")]
    EndOfStream {
        stream: StreamId,
        cursor: usize,
        n_tokens: usize,
    },
    #[error("{len} words do not fit in a {token_size}-word token")]
    TokenOverflow { len: usize, token_size: usize },
    #[error("seek by {delta} from cursor {cursor} leaves [0, {n_tokens}]")]
    SeekOutOfRange {
        cursor: usize,
        delta: isize,
        n_tokens: usize,
    },
}

/// State held while a stream is open.
#[derive(Debug, Clone, PartialEq, Eq)]
struct OpenState {
    owner: CoreId,
    epoch: u64,
    /// Token index staged in the prefetch buffer, if any.
    prefetched: Option<usize>,
    /// Set once prefetch has been requested on this open.
    double_buffered: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    id: StreamId,
    token_size: usize,
    data: Vec<f32>,
    cursor: usize,
    open: Option<OpenState>,
    epochs: u64,
}

impl Stream {
    pub fn id(&self) -> StreamId {
        self.id
    }

    pub fn token_size(&self) -> usize {
        self.token_size
    }

    pub fn n_tokens(&self) -> usize {
        self.data.len() / self.token_size
    }

    pub fn len_words(&self) -> usize {
        self.data.len()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn owner(&self) -> Option<CoreId> {
        self.open.as_ref().map(|o| o.owner)
    }

    /// Token index currently staged for prefetch, if the stream is open.
    pub fn prefetched(&self) -> Option<usize> {
        self.open.as_ref().and_then(|o| o.prefetched)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn token(&self, index: usize) -> Option<&[f32]> {
        let start = index.checked_mul(self.token_size)?;
        self.data.get(start..start + self.token_size)
    }

    pub fn tokens(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.token_size)
    }
}

/// Proof of ownership of an open stream. Only valid between the `open` that
/// produced it and the matching `close`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamHandle {
    stream: StreamId,
    core: CoreId,
    epoch: u64,
    token_size: usize,
}

impl StreamHandle {
    pub fn stream(&self) -> StreamId {
        self.stream
    }

    pub fn core(&self) -> CoreId {
        self.core
    }

    /// Size of every token of the stream, in words.
    pub fn token_size(&self) -> usize {
        self.token_size
    }
}

/// Result of a successful `move_down`.
#[derive(Debug, Clone, PartialEq)]
pub struct Fetched {
    pub token: Vec<f32>,
    /// Index of the token that was read.
    pub index: usize,
    /// True when this call turned on double buffering for the open stream.
    pub started_prefetch: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalPool {
    capacity: usize,
    local_words: usize,
    used: usize,
    streams: Vec<Stream>,
}

impl ExternalPool {
    /// A pool of `capacity` words whose tokens must fit in `local_words`.
    pub fn new(capacity: usize, local_words: usize) -> Self {
        ExternalPool {
            capacity,
            local_words,
            used: 0,
            streams: Vec::new(),
        }
    }

    pub fn for_machine(m: &MachineParams) -> Self {
        Self::new(m.external_words, m.local_words)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn local_words(&self) -> usize {
        self.local_words
    }

    pub fn used(&self) -> usize {
        self.used
    }

    pub fn len(&self) -> usize {
        self.streams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }

    pub fn stream(&self, id: StreamId) -> Option<&Stream> {
        self.streams.get(id)
    }

    pub fn streams(&self) -> &[Stream] {
        &self.streams
    }

    /// Creates a closed stream of `total` words split into `token_size`-word
    /// tokens. Ids are handed out densely in creation order.
    pub fn create(
        &mut self,
        total: usize,
        token_size: usize,
        initial: Option<&[f32]>,
    ) -> Result<StreamId, StreamError> {
        if token_size == 0 {
            return Err(StreamError::EmptyToken);
        }
        if token_size > self.local_words {
            return Err(StreamError::TokenTooLarge {
                token_size,
                local_words: self.local_words,
            });
        }
        if total == 0 || !total.is_multiple_of(token_size) {
            return Err(StreamError::RaggedStream { total, token_size });
        }
        if let Some(init) = initial {
            if init.len() != total {
                return Err(StreamError::InitialDataLength {
                    expected: total,
                    actual: init.len(),
                });
            }
        }
        let available = self.capacity - self.used;
        if total > available {
            return Err(StreamError::CapacityExceeded {
                requested: total,
                available,
                capacity: self.capacity,
            });
        }
        let data = match initial {
            Some(init) => init.to_vec(),
            None => vec![0.0; total],
        };
        let id = self.streams.len();
        self.streams.push(Stream {
            id,
            token_size,
            data,
            cursor: 0,
            open: None,
            epochs: 0,
        });
        self.used += total;
        Ok(id)
    }

    pub fn open(&mut self, core: CoreId, id: StreamId) -> Result<StreamHandle, StreamError> {
        let stream = self
            .streams
            .get_mut(id)
            .ok_or(StreamError::UnknownStream(id))?;
        if let Some(open) = &stream.open {
            return Err(StreamError::Busy {
                stream: id,
                owner: open.owner,
            });
        }
        stream.epochs += 1;
        stream.open = Some(OpenState {
            owner: core,
            epoch: stream.epochs,
            prefetched: None,
            double_buffered: false,
        });
        Ok(StreamHandle {
            stream: id,
            core,
            epoch: stream.epochs,
            token_size: stream.token_size,
        })
    }

    /// Releases the stream. A pending prefetch is dropped.
    pub fn close(&mut self, handle: &StreamHandle) -> Result<(), StreamError> {
        let stream = self.owned_mut(handle)?;
        stream.open = None;
        Ok(())
    }

    /// Whether double buffering is already active on the handle's stream.
    pub fn is_double_buffered(&self, handle: &StreamHandle) -> Result<bool, StreamError> {
        let stream = self.owned(handle)?;
        Ok(stream.open.as_ref().is_some_and(|o| o.double_buffered))
    }

    /// Reads the token at the cursor and advances it. With `preload`, the
    /// following token (if any) is staged in the prefetch buffer.
    pub fn move_down(
        &mut self,
        handle: &StreamHandle,
        preload: bool,
    ) -> Result<Fetched, StreamError> {
        let stream = self.owned_mut(handle)?;
        let n_tokens = stream.n_tokens();
        let index = stream.cursor;
        if index >= n_tokens {
            return Err(StreamError::EndOfStream {
                stream: stream.id,
                cursor: index,
                n_tokens,
            });
        }
        let start = index * stream.token_size;
        let token = stream.data[start..start + stream.token_size].to_vec();
        stream.cursor += 1;
        let next = stream.cursor;
        let open = stream.open.as_mut().expect("owned stream is open");
        let started_prefetch = preload && !open.double_buffered;
        if preload {
            open.double_buffered = true;
            open.prefetched = (next < n_tokens).then_some(next);
        } else {
            open.prefetched = None;
        }
        Ok(Fetched {
            token,
            index,
            started_prefetch,
        })
    }

    /// Overwrites a prefix of the token at the cursor with `data` and
    /// advances the cursor.
    pub fn move_up(&mut self, handle: &StreamHandle, data: &[f32]) -> Result<(), StreamError> {
        let stream = self.owned_mut(handle)?;
        if data.len() > stream.token_size {
            return Err(StreamError::TokenOverflow {
                len: data.len(),
                token_size: stream.token_size,
            });
        }
        let n_tokens = stream.n_tokens();
        let index = stream.cursor;
        if index >= n_tokens {
            return Err(StreamError::EndOfStream {
                stream: stream.id,
                cursor: index,
                n_tokens,
            });
        }
        let start = index * stream.token_size;
        stream.data[start..start + data.len()].copy_from_slice(data);
        stream.cursor += 1;
        let open = stream.open.as_mut().expect("owned stream is open");
        // A staged copy of the overwritten token is stale.
        if open.prefetched == Some(index) {
            open.prefetched = None;
        }
        Ok(())
    }

    /// Moves the cursor by `delta` tokens.
    pub fn seek(&mut self, handle: &StreamHandle, delta: isize) -> Result<(), StreamError> {
        let stream = self.owned_mut(handle)?;
        let n_tokens = stream.n_tokens();
        let target = stream.cursor as isize + delta;
        if target < 0 || target as usize > n_tokens {
            return Err(StreamError::SeekOutOfRange {
                cursor: stream.cursor,
                delta,
                n_tokens,
            });
        }
        stream.cursor = target as usize;
        let open = stream.open.as_mut().expect("owned stream is open");
        if open.prefetched != Some(stream.cursor) {
            open.prefetched = None;
        }
        Ok(())
    }

    fn owned(&self, handle: &StreamHandle) -> Result<&Stream, StreamError> {
        let stream = self
            .streams
            .get(handle.stream)
            .ok_or(StreamError::UnknownStream(handle.stream))?;
        match &stream.open {
            Some(o) if o.owner == handle.core && o.epoch == handle.epoch => Ok(stream),
            _ => Err(StreamError::InvalidHandle(handle.stream)),
        }
    }

    fn owned_mut(&mut self, handle: &StreamHandle) -> Result<&mut Stream, StreamError> {
        self.owned(handle)?;
        Ok(&mut self.streams[handle.stream])
    }
}
