//! Binary file formats. Everything is little-endian and starts with a four-byte
//! magic followed by a `u32` version.
//!
//! | magic  | contents                                                        |
//! |--------|-----------------------------------------------------------------|
//! | `TCAF` | frame count, layer count, then per layer `h, w, c` and `f·h·w·c` f32 |
//! | `TCAW` | `D_in`, `D_out`, mean (`D_in` f32), projection (`D_in × D_out` f32) |
//! | `TCAD` | video count, then per video id, `f`, `d` and `f × d` f32 rows        |
//! | `TCAE` | encoder config block, then every tensor as `rows, cols` + f32 data   |
//! | `TCAS` | full trainer state in f64 for exact resumption                       |

use std::fs;
use std::io::{BufWriter, Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use tca_core::encoder::{EncoderConfig, EncoderParams, VideoDescriptor, TENSOR_NAMES};
use tca_core::features::{FeatureMapStack, LayerGrid, WhiteningModel};
use tca_core::retrieval::RetrievalCorpus;
use tca_core::trainer::{AdamState, MemoryBank, TrainerState};
use tca_core::{FrameDescriptorSequence, Matrix};

use crate::error::{TcaError, TcaResult};

pub const FEATURE_MAGIC: &[u8; 4] = b"TCAF";
pub const WHITENING_MAGIC: &[u8; 4] = b"TCAW";
pub const CORPUS_MAGIC: &[u8; 4] = b"TCAD";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TCAE";
pub const STATE_MAGIC: &[u8; 4] = b"TCAS";
pub const VERSION: u32 = 1;

/// Writes through a temporary file in the target directory and renames it into place,
/// so readers never observe a partially written file.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> TcaResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let io = |e| TcaError::io(path, e);
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        write(&mut w).map_err(io)?;
        w.flush().map_err(io)?;
    }
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn read_file(path: &Path) -> TcaResult<Vec<u8>> {
    fs::read(path).map_err(|e| TcaError::io(path, e))
}

/// Cursor over a file's bytes that reports truncation and bad headers as data errors.
struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn open(bytes: &'a [u8], path: &'a Path, magic: &[u8; 4]) -> TcaResult<Self> {
        let mut r = Self { cur: Cursor::new(bytes), path };
        let mut found = [0u8; 4];
        r.cur.read_exact(&mut found).map_err(|_| r.fail("file too short for a header"))?;
        if &found != magic {
            return Err(r.fail(&format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&found)
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail(&format!("unsupported version {version}")));
        }
        Ok(r)
    }

    fn fail(&self, msg: &str) -> TcaError {
        TcaError::Data(format!("{}: {msg}", self.path.display()))
    }

    fn truncated(&self) -> TcaError {
        self.fail("truncated file")
    }

    fn remaining(&self) -> usize {
        self.cur.get_ref().len() - self.cur.position() as usize
    }

    fn u32(&mut self) -> TcaResult<u32> {
        self.cur.read_u32::<LE>().map_err(|_| self.truncated())
    }

    fn u64(&mut self) -> TcaResult<u64> {
        self.cur.read_u64::<LE>().map_err(|_| self.truncated())
    }

    fn f64(&mut self) -> TcaResult<f64> {
        self.cur.read_f64::<LE>().map_err(|_| self.truncated())
    }

    fn usize32(&mut self) -> TcaResult<usize> {
        Ok(self.u32()? as usize)
    }

    fn usize64(&mut self) -> TcaResult<usize> {
        usize::try_from(self.u64()?).map_err(|_| self.fail("count does not fit in memory"))
    }

    fn checked_len(&self, count: usize, width: usize) -> TcaResult<usize> {
        match count.checked_mul(width) {
            Some(bytes) if bytes <= self.remaining() => Ok(bytes),
            _ => Err(self.truncated()),
        }
    }

    fn f32s(&mut self, count: usize) -> TcaResult<Vec<f64>> {
        self.checked_len(count, 4)?;
        let mut buf = vec![0f32; count];
        self.cur.read_f32_into::<LE>(&mut buf).map_err(|_| self.truncated())?;
        if buf.iter().any(|v| !v.is_finite()) {
            return Err(self.fail("non-finite value"));
        }
        Ok(buf.into_iter().map(f64::from).collect())
    }

    fn f64s(&mut self, count: usize) -> TcaResult<Vec<f64>> {
        self.checked_len(count, 8)?;
        let mut buf = vec![0f64; count];
        self.cur.read_f64_into::<LE>(&mut buf).map_err(|_| self.truncated())?;
        Ok(buf)
    }

    fn string(&mut self) -> TcaResult<String> {
        let len = self.usize32()?;
        self.checked_len(len, 1)?;
        let mut buf = vec![0u8; len];
        self.cur.read_exact(&mut buf).map_err(|_| self.truncated())?;
        String::from_utf8(buf).map_err(|_| self.fail("id is not valid UTF-8"))
    }

    fn finish(self) -> TcaResult<()> {
        if self.remaining() != 0 {
            return Err(self.fail(&format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

fn header(w: &mut dyn Write, magic: &[u8; 4]) -> std::io::Result<()> {
    w.write_all(magic)?;
    w.write_u32::<LE>(VERSION)
}

fn put_u32(w: &mut dyn Write, v: usize) -> std::io::Result<()> {
    let v = u32::try_from(v).map_err(|_| std::io::Error::other(format!("{v} does not fit in u32")))?;
    w.write_u32::<LE>(v)
}

fn put_f32s(w: &mut dyn Write, values: &[f64]) -> std::io::Result<()> {
    values.iter().try_for_each(|&v| w.write_f32::<LE>(v as f32))
}

fn put_f64s(w: &mut dyn Write, values: &[f64]) -> std::io::Result<()> {
    values.iter().try_for_each(|&v| w.write_f64::<LE>(v))
}

fn put_string(w: &mut dyn Write, s: &str) -> std::io::Result<()> {
    put_u32(w, s.len())?;
    w.write_all(s.as_bytes())
}

// ---- feature maps ----

/// Reads one video's per-frame feature-map stacks.
pub fn read_feature_maps(path: &Path) -> TcaResult<Vec<FeatureMapStack>> {
    let bytes = read_file(path)?;
    let mut r = Reader::open(&bytes, path, FEATURE_MAGIC)?;
    let frames = r.usize32()?;
    let layers = r.usize32()?;
    if frames == 0 || layers == 0 {
        return Err(r.fail(&format!("{frames} frames and {layers} layers; both must be positive")));
    }
    let mut per_frame: Vec<Vec<LayerGrid>> = (0..frames).map(|_| Vec::with_capacity(layers)).collect();
    for _ in 0..layers {
        let (h, w, c) = (r.usize32()?, r.usize32()?, r.usize32()?);
        let size = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| r.fail("layer size overflows"))?;
        r.checked_len(size, 4 * frames)?;
        for grids in per_frame.iter_mut() {
            grids.push(LayerGrid::new(h, w, c, r.f32s(size)?)?);
        }
    }
    r.finish()?;
    per_frame
        .into_iter()
        .enumerate()
        .map(|(i, grids)| Ok(FeatureMapStack::new(i, grids)?))
        .collect()
}

/// All frames must share the same layer shapes.
pub fn write_feature_maps(path: &Path, frames: &[FeatureMapStack]) -> TcaResult<()> {
    let first = frames.first().ok_or_else(|| TcaError::Data("no frames to write".into()))?;
    let shapes: Vec<(usize, usize, usize)> =
        first.layers().iter().map(|g| (g.height(), g.width(), g.channels())).collect();
    for f in frames {
        let s: Vec<_> = f.layers().iter().map(|g| (g.height(), g.width(), g.channels())).collect();
        if s != shapes {
            return Err(TcaError::Data("frames have differing layer shapes".into()));
        }
    }
    write_atomic(path, |w| {
        header(w, FEATURE_MAGIC)?;
        put_u32(w, frames.len())?;
        put_u32(w, shapes.len())?;
        for (k, &(h, wd, c)) in shapes.iter().enumerate() {
            put_u32(w, h)?;
            put_u32(w, wd)?;
            put_u32(w, c)?;
            for f in frames {
                put_f32s(w, f.layers()[k].as_slice())?;
            }
        }
        Ok(())
    })
}

// ---- whitening ----

pub fn read_whitening(path: &Path) -> TcaResult<WhiteningModel> {
    let bytes = read_file(path)?;
    let mut r = Reader::open(&bytes, path, WHITENING_MAGIC)?;
    let (d_in, d_out) = (r.usize32()?, r.usize32()?);
    let mean = r.f32s(d_in)?;
    let projection = Matrix::from_vec(d_in, d_out, r.f32s(d_in * d_out)?)?;
    r.finish()?;
    Ok(WhiteningModel::new(mean, projection)?)
}

pub fn write_whitening(path: &Path, model: &WhiteningModel) -> TcaResult<()> {
    write_atomic(path, |w| {
        header(w, WHITENING_MAGIC)?;
        put_u32(w, model.input_dim())?;
        put_u32(w, model.output_dim())?;
        put_f32s(w, model.mean())?;
        put_f32s(w, model.projection().as_slice())
    })
}

// ---- descriptor corpora ----

pub fn read_corpus(path: &Path) -> TcaResult<RetrievalCorpus> {
    let bytes = read_file(path)?;
    let mut r = Reader::open(&bytes, path, CORPUS_MAGIC)?;
    let count = r.usize32()?;
    let mut corpus = RetrievalCorpus::new();
    for _ in 0..count {
        let id = r.string()?;
        let (f, d) = (r.usize32()?, r.usize32()?);
        let n = f.checked_mul(d).ok_or_else(|| r.fail("video size overflows"))?;
        let rows = Matrix::from_vec(f, d, r.f32s(n)?)?;
        let seq = FrameDescriptorSequence::new(rows).map_err(|e| r.fail(&format!("video {id:?}: {e}")))?;
        corpus.insert(id, seq).map_err(|e| r.fail(&e.to_string()))?;
    }
    r.finish()?;
    Ok(corpus)
}

/// Videos are written in ascending id order, so equal corpora give equal bytes.
pub fn write_corpus(path: &Path, corpus: &RetrievalCorpus) -> TcaResult<()> {
    write_atomic(path, |w| {
        header(w, CORPUS_MAGIC)?;
        put_u32(w, corpus.len())?;
        for (id, seq) in corpus.iter() {
            put_string(w, id)?;
            put_u32(w, seq.frames())?;
            put_u32(w, seq.dim())?;
            put_f32s(w, seq.matrix().as_slice())?;
        }
        Ok(())
    })
}

// ---- encoder checkpoints ----

fn put_config(w: &mut dyn Write, c: &EncoderConfig) -> std::io::Result<()> {
    put_u32(w, c.dim)?;
    put_u32(w, c.heads)?;
    put_u32(w, c.ffn_dim)?;
    w.write_f64::<LE>(c.dropout_rate)?;
    w.write_u64::<LE>(c.seed)
}

fn read_config(r: &mut Reader<'_>) -> TcaResult<EncoderConfig> {
    let config = EncoderConfig {
        dim: r.usize32()?,
        heads: r.usize32()?,
        ffn_dim: r.usize32()?,
        dropout_rate: r.f64()?,
        seed: r.u64()?,
    };
    config.validate().map_err(|e| r.fail(&e.to_string()))?;
    Ok(config)
}

fn read_tensors(r: &mut Reader<'_>, config: &EncoderConfig, wide: bool) -> TcaResult<EncoderParams> {
    let mut tensors = Vec::with_capacity(TENSOR_NAMES.len());
    for (name, (rows, cols)) in TENSOR_NAMES.iter().zip(EncoderParams::tensor_shapes(config)) {
        let (fr, fc) = (r.usize32()?, r.usize32()?);
        if (fr, fc) != (rows, cols) {
            return Err(r.fail(&format!("tensor {name} is {fr}x{fc}, expected {rows}x{cols}")));
        }
        tensors.push(if wide { r.f64s(rows * cols)? } else { r.f32s(rows * cols)? });
    }
    Ok(EncoderParams::from_tensors(*config, tensors)?)
}

fn put_tensors(w: &mut dyn Write, params: &EncoderParams, wide: bool) -> std::io::Result<()> {
    for ((rows, cols), data) in EncoderParams::tensor_shapes(&params.config).into_iter().zip(params.tensors()) {
        put_u32(w, rows)?;
        put_u32(w, cols)?;
        if wide {
            put_f64s(w, data)?;
        } else {
            put_f32s(w, data)?;
        }
    }
    Ok(())
}

/// Tensors are stored as f32, so a round trip rounds every parameter to f32.
pub fn read_checkpoint(path: &Path) -> TcaResult<EncoderParams> {
    let bytes = read_file(path)?;
    let mut r = Reader::open(&bytes, path, CHECKPOINT_MAGIC)?;
    let config = read_config(&mut r)?;
    let params = read_tensors(&mut r, &config, false)?;
    r.finish()?;
    Ok(params)
}

pub fn write_checkpoint(path: &Path, params: &EncoderParams) -> TcaResult<()> {
    write_atomic(path, |w| {
        header(w, CHECKPOINT_MAGIC)?;
        put_config(w, &params.config)?;
        put_tensors(w, params, false)
    })
}

// ---- trainer state ----

/// Trainer state plus an opaque tag naming the run configuration it belongs to.
pub fn read_trainer_state(path: &Path) -> TcaResult<(TrainerState, String)> {
    let bytes = read_file(path)?;
    let mut r = Reader::open(&bytes, path, STATE_MAGIC)?;
    let tag = r.string()?;
    let config = read_config(&mut r)?;
    let epochs_done = r.usize64()?;
    let global_step = r.u64()?;
    let params = read_tensors(&mut r, &config, true)?;
    let mut optimizer = AdamState::new(&params);
    optimizer.step = r.u64()?;
    optimizer.beta1 = r.f64()?;
    optimizer.beta2 = r.f64()?;
    optimizer.eps = r.f64()?;
    optimizer.first_moment = read_tensors(&mut r, &config, true)?;
    optimizer.second_moment = read_tensors(&mut r, &config, true)?;
    let capacity = r.usize64()?;
    let len = r.usize64()?;
    let mut bank = MemoryBank::new(capacity)?;
    r.checked_len(len, 8 * config.dim)?;
    for _ in 0..len {
        let v = r.f64s(config.dim)?;
        bank.push([VideoDescriptor::from_unit(v)?])?;
    }
    r.finish()?;
    Ok((TrainerState { params, optimizer, bank, epochs_done, global_step }, tag))
}

pub fn write_trainer_state(path: &Path, state: &TrainerState, tag: &str) -> TcaResult<()> {
    write_atomic(path, |w| {
        header(w, STATE_MAGIC)?;
        put_string(w, tag)?;
        put_config(w, &state.params.config)?;
        w.write_u64::<LE>(state.epochs_done as u64)?;
        w.write_u64::<LE>(state.global_step)?;
        put_tensors(w, &state.params, true)?;
        let o = &state.optimizer;
        w.write_u64::<LE>(o.step)?;
        put_f64s(w, &[o.beta1, o.beta2, o.eps])?;
        put_tensors(w, &o.first_moment, true)?;
        put_tensors(w, &o.second_moment, true)?;
        w.write_u64::<LE>(state.bank.capacity() as u64)?;
        w.write_u64::<LE>(state.bank.len() as u64)?;
        for entry in state.bank.iter() {
            put_f64s(w, entry.as_slice())?;
        }
        Ok(())
    })
}
