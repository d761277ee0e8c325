//! On-disk corpus: `signals.bin`, `triplets.jsonl`, `manifest.json`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::classes::ClassRegistry;
use super::corpus::{Corpus, GeneratorConfig, QaTriplet, ShiftParams, SplitManifest};
use super::signal::EcgSignal;
use crate::{Error, Result};

pub const CORPUS_FORMAT_VERSION: u32 = 1;
const SIGNAL_MAGIC: &[u8; 8] = b"ECGQASIG";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    seed: u64,
    config: GeneratorConfig,
    shift: ShiftParams,
    registry: ClassRegistry,
    split: SplitManifest,
}

#[derive(Serialize, Deserialize)]
struct TripletHeader {
    format_version: u32,
    count: usize,
}

fn format_err(m: impl Into<String>) -> Error {
    Error::Format(m.into())
}

/// Header: magic, version, `T_s`, `C`, count; each record is `C` lead-mask
/// bytes followed by `T_s * C` little-endian `f32` samples, row-major.
pub fn write_signals(w: &mut impl Write, signals: &[EcgSignal]) -> Result<()> {
    let (t, c) = signals.first().map_or((0, 0), |s| (s.t_len(), s.n_leads()));
    w.write_all(SIGNAL_MAGIC)?;
    w.write_all(&CORPUS_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(t as u32).to_le_bytes())?;
    w.write_all(&(c as u32).to_le_bytes())?;
    w.write_all(&(signals.len() as u64).to_le_bytes())?;
    for s in signals {
        if (s.t_len(), s.n_leads()) != (t, c) {
            return Err(format_err("signals of mixed shape"));
        }
        let mask: Vec<u8> = s.lead_mask().iter().map(|&k| u8::from(k)).collect();
        w.write_all(&mask)?;
        for v in s.samples() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_signals(r: &mut impl Read) -> Result<Vec<EcgSignal>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != SIGNAL_MAGIC {
        return Err(format_err("not a signal file"));
    }
    let mut u32buf = [0u8; 4];
    let mut next_u32 = |r: &mut dyn Read| -> Result<u32> {
        r.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = next_u32(r)?;
    if version != CORPUS_FORMAT_VERSION {
        return Err(format_err(format!("signal format version {version}")));
    }
    let t = next_u32(r)? as usize;
    let c = next_u32(r)? as usize;
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    let count = u64::from_le_bytes(u64buf) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    let mut mask = vec![0u8; c];
    let mut raw = vec![0u8; t * c * 4];
    for _ in 0..count {
        r.read_exact(&mut mask)?;
        r.read_exact(&mut raw)?;
        let samples = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let signal = EcgSignal::new(t, c, samples)?;
        let keep: Vec<bool> = mask.iter().map(|&b| b != 0).collect();
        out.push(if keep.iter().all(|&k| k) { signal } else { signal.with_mask(&keep)? });
    }
    Ok(out)
}

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join("signals.bin"))?);
    write_signals(&mut w, &corpus.signals)?;
    w.flush()?;

    let mut w = BufWriter::new(File::create(dir.join("triplets.jsonl"))?);
    let header = TripletHeader { format_version: CORPUS_FORMAT_VERSION, count: corpus.triplets.len() };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for t in &corpus.triplets {
        writeln!(w, "{}", serde_json::to_string(t)?)?;
    }
    w.flush()?;

    let manifest = Manifest {
        format_version: CORPUS_FORMAT_VERSION,
        seed: corpus.seed,
        config: corpus.config.clone(),
        shift: corpus.shift,
        registry: corpus.registry.clone(),
        split: corpus.manifest.clone(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format_version != CORPUS_FORMAT_VERSION {
        return Err(format_err(format!("manifest format version {}", manifest.format_version)));
    }
    let signals = read_signals(&mut BufReader::new(File::open(dir.join("signals.bin"))?))?;

    let mut lines = BufReader::new(File::open(dir.join("triplets.jsonl"))?).lines();
    let header: TripletHeader = serde_json::from_str(&lines.next().ok_or_else(|| format_err("empty triplet file"))??)?;
    if header.format_version != CORPUS_FORMAT_VERSION {
        return Err(format_err(format!("triplet format version {}", header.format_version)));
    }
    let mut triplets = Vec::with_capacity(header.count);
    for line in lines {
        let t: QaTriplet = serde_json::from_str(&line?)?;
        if t.signal_index >= signals.len() {
            return Err(format_err(format!("triplet refers to missing signal {}", t.signal_index)));
        }
        triplets.push(t);
    }
    if triplets.len() != header.count {
        return Err(format_err(format!("{} triplets, header says {}", triplets.len(), header.count)));
    }
    let corpus = Corpus {
        config: manifest.config,
        seed: manifest.seed,
        shift: manifest.shift,
        registry: manifest.registry,
        signals,
        triplets,
        manifest: manifest.split,
    };
    corpus.manifest.check_disjoint()?;
    corpus.verify_answers()?;
    Ok(corpus)
}
