//! Versioned binary checkpoints: everything needed to resume training
//! bit-exactly, stored the way the hardware would keep it in DRAM.
//!
//! Weights and momentum are serialized as their banked circulant images (see
//! [`crate::xposebuf`]), so a checkpoint is tied to the `pof` it was written
//! for; resuming under a different unroll is rejected rather than silently
//! relaid. The stochastic rounding stream, saturation counter, and epoch /
//! batch counters ride along so a resumed run is indistinguishable from an
//! uninterrupted one.
//!
//! All integers are little-endian. Layout (version 1):
//!
//! ```text
//! magic    8  b"FXTRCKPT"
//! version  4  u32 = 1
//! seed     8  u64   weight-init seed
//! epochs   4  u32   epochs completed
//! batches  8  u64   batches completed
//! sats     8  u64   saturation counter
//! formats  5  u8    frac bits: weights, activations, gradients,
//!                   weight gradients, scalars
//! rounding 1  u8    0 = nearest-even, 1 = stochastic
//! rseed    8  u64   stochastic seed (0 when nearest-even)
//! rpos    16  u128  stochastic stream position (0 when nearest-even)
//! alpha    2  i16   quantized learning rate (integrity check)
//! beta     2  i16   quantized momentum factor
//! invb     2  i16   quantized reciprocal batch size
//! pof      4  u32   filter unroll the images are laid out for
//! layers   4  u32   number of Conv/FC layers
//! per layer:
//!   index  4  u32   layer index in the network
//!   nkx, nky, nif, nof   4 x u32
//!   words  8  u64   circulant image length (per image)
//!   weight image    words x i16
//!   momentum image  words x i16
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::fxp::Rounding;
use crate::golden::train::TrainState;
use crate::xposebuf::XposeBuf;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"FXTRCKPT";
const VERSION: u32 = 1;

/// Parsed checkpoint header, exposed for inspection/reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub epochs_done: u32,
    pub batches_done: u64,
    pub saturations: u64,
    pub pof: u32,
}

fn artifact<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Artifact(msg.into()))
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|_| Error::Artifact("checkpoint truncated".into()))?;
        Ok(b)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.bytes()?))
    }

    fn i16(&mut self) -> Result<i16> {
        Ok(i16::from_le_bytes(self.bytes()?))
    }

    fn words(&mut self, n: usize) -> Result<Vec<i16>> {
        let mut raw = vec![0u8; n * 2];
        self.inner
            .read_exact(&mut raw)
            .map_err(|_| Error::Artifact("checkpoint truncated".into()))?;
        Ok(raw.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect())
    }
}

fn write_words(w: &mut impl Write, words: &[i16], path: &Path) -> Result<()> {
    let mut raw = Vec::with_capacity(words.len() * 2);
    for v in words {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&raw).map_err(|e| Error::io(path, e))
}

/// Serialize the training state for the given filter unroll.
pub fn write_checkpoint(path: &Path, state: &TrainState, pof: usize) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);

    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&state.init_seed.to_le_bytes()).map_err(io_err)?;
    w.write_all(&state.epochs_done.to_le_bytes()).map_err(io_err)?;
    w.write_all(&state.batches_done.to_le_bytes()).map_err(io_err)?;
    w.write_all(&state.rounder.saturations().to_le_bytes()).map_err(io_err)?;
    let f = &state.formats;
    for fmt in [f.weights, f.activations, f.gradients, f.weight_gradients, f.scalars] {
        w.write_all(&[fmt.frac_bits()]).map_err(io_err)?;
    }
    let (rtag, rseed) = match f.rounding {
        Rounding::NearestEven => (0u8, 0u64),
        Rounding::Stochastic { seed } => (1, seed),
    };
    w.write_all(&[rtag]).map_err(io_err)?;
    w.write_all(&rseed.to_le_bytes()).map_err(io_err)?;
    w.write_all(&state.rounder.stream_pos().unwrap_or(0).to_le_bytes()).map_err(io_err)?;
    for v in [state.alpha.raw(), state.beta.raw(), state.inv_batch.raw()] {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    w.write_all(&(pof as u32).to_le_bytes()).map_err(io_err)?;

    let mac: Vec<usize> =
        (0..state.net.layers.len()).filter(|&i| state.net.layers[i].is_mac_layer()).collect();
    w.write_all(&(mac.len() as u32).to_le_bytes()).map_err(io_err)?;
    for &i in &mac {
        let l = state.net.layers[i];
        for v in [i, l.nkx, l.nky, l.nif, l.nof] {
            w.write_all(&(v as u32).to_le_bytes()).map_err(io_err)?;
        }
        let weights = state.weights[i].as_ref().expect("mac layer has weights");
        let momentum = state.momentum[i].as_ref().expect("mac layer has momentum");
        let wimg = XposeBuf::from_tensor(weights, pof).dram_image();
        let mimg = XposeBuf::from_tensor(momentum, pof).dram_image();
        assert_eq!(wimg.len(), mimg.len());
        w.write_all(&(wimg.len() as u64).to_le_bytes()).map_err(io_err)?;
        write_words(&mut w, &wimg, path)?;
        write_words(&mut w, &mimg, path)?;
    }
    w.flush().map_err(io_err)
}

/// Load a checkpoint into a freshly constructed state (same config). The
/// network shape, number formats, quantized scalars, and `pof` must all match
/// what the checkpoint was written with.
pub fn read_checkpoint(path: &Path, state: &mut TrainState, pof: usize) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { inner: BufReader::new(file) };

    if &r.bytes::<8>()? != MAGIC {
        return artifact("not a checkpoint file (bad magic)");
    }
    let version = r.u32()?;
    if version != VERSION {
        return artifact(format!("unsupported checkpoint version {version}"));
    }
    let seed = r.u64()?;
    let epochs_done = r.u32()?;
    let batches_done = r.u64()?;
    let saturations = r.u64()?;

    let f = &state.formats;
    let want_fracs =
        [f.weights, f.activations, f.gradients, f.weight_gradients, f.scalars].map(|q| q.frac_bits());
    let got_fracs = r.bytes::<5>()?;
    if got_fracs != want_fracs {
        return artifact(format!(
            "checkpoint number formats {got_fracs:?} do not match config {want_fracs:?}"
        ));
    }
    let rtag = r.u8()?;
    let rseed = r.u64()?;
    let rpos = r.u128()?;
    let want_rounding = match f.rounding {
        Rounding::NearestEven => (0u8, 0u64),
        Rounding::Stochastic { seed } => (1, seed),
    };
    if (rtag, rseed) != want_rounding {
        return artifact("checkpoint rounding mode does not match config");
    }
    let (alpha, beta, invb) = (r.i16()?, r.i16()?, r.i16()?);
    if (alpha, beta, invb) != (state.alpha.raw(), state.beta.raw(), state.inv_batch.raw()) {
        return artifact("checkpoint training scalars do not match config");
    }
    let cp_pof = r.u32()?;
    if cp_pof as usize != pof {
        return artifact(format!(
            "checkpoint images are laid out for a filter unroll of {cp_pof}, not {pof}"
        ));
    }

    let mac: Vec<usize> =
        (0..state.net.layers.len()).filter(|&i| state.net.layers[i].is_mac_layer()).collect();
    let count = r.u32()? as usize;
    if count != mac.len() {
        return artifact(format!(
            "checkpoint has {count} weight layers, network has {}",
            mac.len()
        ));
    }
    for &i in &mac {
        let l = state.net.layers[i];
        let got = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        if got != [i, l.nkx, l.nky, l.nif, l.nof] {
            return artifact(format!(
                "checkpoint layer record {got:?} does not match network layer {} ({} {} {} {})",
                i, l.nkx, l.nky, l.nif, l.nof
            ));
        }
        let words = r.u64()? as usize;
        let expect = XposeBuf::image_words_for(pof, l.nkx, l.nky, l.nif, l.nof);
        if words != expect {
            return artifact(format!(
                "checkpoint image length {words} does not match layout ({expect})"
            ));
        }
        let wimg = r.words(words)?;
        let mimg = r.words(words)?;
        let wbuf = XposeBuf::from_dram_image(pof, l.nkx, l.nky, l.nif, l.nof, &wimg);
        let mbuf = XposeBuf::from_dram_image(pof, l.nkx, l.nky, l.nif, l.nof, &mimg);
        state.weights[i] = Some(wbuf.to_tensor(state.formats.weights));
        state.momentum[i] = Some(mbuf.to_tensor(state.formats.weight_gradients));
    }
    let mut trailer = [0u8; 1];
    if r.inner.read(&mut trailer).map_err(|e| Error::io(path, e))? != 0 {
        return artifact("trailing bytes after checkpoint payload");
    }

    state.epochs_done = epochs_done;
    state.batches_done = batches_done;
    state.rounder.set_saturations(saturations);
    if rtag == 1 {
        state.rounder.set_stream_pos(rpos);
    }
    Ok(Checkpoint { seed, epochs_done, batches_done, saturations, pof: cp_pof })
}
