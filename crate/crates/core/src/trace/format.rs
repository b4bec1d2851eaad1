//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! "AKVT" | version u32 | header_len u32 | header JSON (header_len bytes)
//! task block   : per layer, per head: Q (task_rows x d_head)          [optional]
//! each window  : per layer, per head: Q, K, V (window x d_head)
//! each decode  : per layer, per head: Q, K, V (1 x d_head)
//! ground truth JSON (header.ground_truth_bytes bytes)                 [optional]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::{GroundTruth, Trace, TraceError, TraceHeader, WindowBlock};
use crate::cache::spill::{read_f32s, write_f32s};
use crate::linalg::DenseMatrix;

pub const TRACE_MAGIC: &[u8; 4] = b"AKVT";
pub const TRACE_VERSION: u32 = 1;
pub const DTYPE_F32LE: &str = "f32le";

const PREFIX_LEN: u64 = 12;

/// Bytes of tensor payload implied by a header.
pub fn payload_len(h: &TraceHeader) -> u64 {
    let streams = (h.layers * h.heads) as u64;
    let d = h.head_dim() as u64;
    let rows =
        h.task_rows as u64 + 3 * (h.window * h.num_windows) as u64 + 3 * h.num_decode_steps as u64;
    4 * d * streams * rows
}

pub fn write_trace(path: &Path, trace: &Trace) -> Result<(), TraceError> {
    let mut header = trace.header.clone();
    let gt_bytes = match &trace.ground_truth {
        Some(gt) => {
            serde_json::to_vec(gt).map_err(|e| TraceError::BadGroundTruth(e.to_string()))?
        }
        None => Vec::new(),
    };
    header.has_ground_truth = trace.ground_truth.is_some();
    header.ground_truth_bytes = gt_bytes.len() as u64;
    header.task_rows = trace
        .task
        .as_ref()
        .map_or(0, |t| t.first().map_or(0, |m| m.rows()));
    header.has_task_block = header.task_rows > 0;
    header.num_windows = trace.windows.len();
    header.num_decode_steps = trace.decode.len();
    header.validate()?;

    let (l, h, d) = (header.layers, header.heads, header.head_dim());
    if let Some(task) = &trace.task {
        if task.len() != l * h
            || task
                .iter()
                .any(|m| m.rows() != header.task_rows || m.cols() != d)
        {
            return Err(TraceError::Shape("task block".into()));
        }
    }
    for w in &trace.windows {
        w.check_shape(l, h, header.window, d)?;
    }
    for w in &trace.decode {
        w.check_shape(l, h, 1, d)?;
    }

    let json = serde_json::to_vec(&header).map_err(|e| TraceError::BadHeader(e.to_string()))?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(TRACE_MAGIC)?;
    out.write_all(&TRACE_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    if let Some(task) = &trace.task {
        for m in task {
            write_f32s(&mut out, m.as_slice())?;
        }
    }
    for w in trace.windows.iter().chain(&trace.decode) {
        for i in 0..l * h {
            write_f32s(&mut out, w.q[i].as_slice())?;
            write_f32s(&mut out, w.k[i].as_slice())?;
            write_f32s(&mut out, w.v[i].as_slice())?;
        }
    }
    out.write_all(&gt_bytes)?;
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Task,
    Prefill(usize),
    Decode(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceBlock {
    pub kind: BlockKind,
    /// For [`BlockKind::Task`] only `q` is populated.
    pub block: WindowBlock,
}

/// Random-access reader. Each call to [`blocks`](Self::blocks) opens its
/// own file handle, so iterators may run concurrently.
#[derive(Debug, Clone)]
pub struct TraceReader {
    path: PathBuf,
    header: TraceHeader,
    payload_start: u64,
    ground_truth: Option<GroundTruth>,
}

impl TraceReader {
    pub fn open(path: &Path) -> Result<Self, TraceError> {
        let mut f = File::open(path)?;
        let file_len = f.metadata()?.len();
        let mut magic = [0u8; 4];
        read_exact_at(&mut f, &mut magic, 0, file_len)?;
        if &magic != TRACE_MAGIC {
            return Err(TraceError::BadMagic(magic));
        }
        let mut prefix = [0u8; PREFIX_LEN as usize];
        read_exact_at(&mut f, &mut prefix, 0, file_len)?;
        let version = u32::from_le_bytes(prefix[4..8].try_into().unwrap());
        if version != TRACE_VERSION {
            return Err(TraceError::VersionUnsupported(version));
        }
        let header_len = u32::from_le_bytes(prefix[8..12].try_into().unwrap()) as u64;
        let mut json = vec![0u8; header_len as usize];
        read_exact_at(&mut f, &mut json, PREFIX_LEN, file_len)?;
        let header: TraceHeader =
            serde_json::from_slice(&json).map_err(|e| TraceError::BadHeader(e.to_string()))?;
        header.validate()?;

        let payload_start = PREFIX_LEN + header_len;
        let payload_end = payload_start + payload_len(&header);
        let expected = payload_end + header.ground_truth_bytes;
        if file_len < payload_end {
            return Err(TraceError::TruncatedFile {
                offset: first_incomplete_tensor(&header, payload_start, file_len),
            });
        }
        if file_len < expected {
            return Err(TraceError::TruncatedFile {
                offset: payload_end,
            });
        }
        if file_len > expected {
            return Err(TraceError::BadHeader(format!(
                "{} trailing bytes after declared content",
                file_len - expected
            )));
        }

        let ground_truth = if header.has_ground_truth {
            let mut buf = vec![0u8; header.ground_truth_bytes as usize];
            read_exact_at(&mut f, &mut buf, payload_end, file_len)?;
            let gt: GroundTruth = serde_json::from_slice(&buf)
                .map_err(|e| TraceError::BadGroundTruth(e.to_string()))?;
            gt.validate(&header)?;
            Some(gt)
        } else {
            None
        };

        Ok(Self {
            path: path.to_path_buf(),
            header,
            payload_start,
            ground_truth,
        })
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    pub fn ground_truth(&self) -> Option<&GroundTruth> {
        self.ground_truth.as_ref()
    }

    pub fn blocks(&self) -> Result<BlockIter, TraceError> {
        let mut f = BufReader::new(File::open(&self.path)?);
        f.seek(SeekFrom::Start(self.payload_start))?;
        Ok(BlockIter {
            reader: f,
            header: self.header.clone(),
            offset: self.payload_start,
            kinds: block_order(&self.header).into_iter(),
            failed: false,
        })
    }

    /// Loads the whole trace into memory.
    pub fn read_all(&self) -> Result<Trace, TraceError> {
        let mut trace = Trace {
            header: self.header.clone(),
            task: None,
            windows: Vec::with_capacity(self.header.num_windows),
            decode: Vec::with_capacity(self.header.num_decode_steps),
            ground_truth: self.ground_truth.clone(),
        };
        for b in self.blocks()? {
            let b = b?;
            match b.kind {
                BlockKind::Task => trace.task = Some(b.block.q),
                BlockKind::Prefill(_) => trace.windows.push(b.block),
                BlockKind::Decode(_) => trace.decode.push(b.block),
            }
        }
        Ok(trace)
    }
}

pub fn read_trace(path: &Path) -> Result<Trace, TraceError> {
    TraceReader::open(path)?.read_all()
}

fn block_order(h: &TraceHeader) -> Vec<BlockKind> {
    let task = h.has_task_block.then_some(BlockKind::Task);
    task.into_iter()
        .chain((0..h.num_windows).map(BlockKind::Prefill))
        .chain((0..h.num_decode_steps).map(BlockKind::Decode))
        .collect()
}

pub struct BlockIter {
    reader: BufReader<File>,
    header: TraceHeader,
    offset: u64,
    kinds: std::vec::IntoIter<BlockKind>,
    failed: bool,
}

impl BlockIter {
    fn read_matrix(&mut self, rows: usize) -> Result<DenseMatrix, TraceError> {
        let d = self.header.head_dim();
        let mut buf = vec![0u8; rows * d * 4];
        self.reader
            .read_exact(&mut buf)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => TraceError::TruncatedFile {
                    offset: self.offset,
                },
                _ => TraceError::Io(e),
            })?;
        self.offset += buf.len() as u64;
        Ok(DenseMatrix::from_vec(rows, d, read_f32s(&buf)).expect("sized buffer"))
    }

    fn read_block(&mut self, kind: BlockKind) -> Result<TraceBlock, TraceError> {
        let (l, h) = (self.header.layers, self.header.heads);
        let n = l * h;
        let mut block = WindowBlock {
            layers: l,
            heads: h,
            q: Vec::with_capacity(n),
            k: Vec::with_capacity(n),
            v: Vec::with_capacity(n),
        };
        match kind {
            BlockKind::Task => {
                for _ in 0..n {
                    let q = self.read_matrix(self.header.task_rows)?;
                    block.q.push(q);
                }
            }
            BlockKind::Prefill(_) | BlockKind::Decode(_) => {
                let rows = if matches!(kind, BlockKind::Prefill(_)) {
                    self.header.window
                } else {
                    1
                };
                for _ in 0..n {
                    let q = self.read_matrix(rows)?;
                    let k = self.read_matrix(rows)?;
                    let v = self.read_matrix(rows)?;
                    block.q.push(q);
                    block.k.push(k);
                    block.v.push(v);
                }
            }
        }
        Ok(TraceBlock { kind, block })
    }
}

impl Iterator for BlockIter {
    type Item = Result<TraceBlock, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let kind = self.kinds.next()?;
        let result = self.read_block(kind);
        self.failed = result.is_err();
        Some(result)
    }
}

fn read_exact_at(
    f: &mut File,
    buf: &mut [u8],
    offset: u64,
    file_len: u64,
) -> Result<(), TraceError> {
    if offset + buf.len() as u64 > file_len {
        return Err(TraceError::TruncatedFile { offset });
    }
    f.seek(SeekFrom::Start(offset))?;
    f.read_exact(buf)?;
    Ok(())
}

/// Offset of the first tensor that does not fit in `file_len` bytes.
fn first_incomplete_tensor(h: &TraceHeader, payload_start: u64, file_len: u64) -> u64 {
    let d = h.head_dim() as u64;
    let streams = (h.layers * h.heads) as u64;
    let mut sizes: Vec<(u64, u64)> = Vec::new();
    if h.task_rows > 0 {
        sizes.push((streams, 4 * d * h.task_rows as u64));
    }
    sizes.push((streams * 3 * h.num_windows as u64, 4 * d * h.window as u64));
    sizes.push((streams * 3 * h.num_decode_steps as u64, 4 * d));
    let mut offset = payload_start;
    for (count, size) in sizes {
        if size == 0 {
            continue;
        }
        let available = file_len.saturating_sub(offset) / size;
        if available < count {
            return offset + available * size;
        }
        offset += count * size;
    }
    offset
}
