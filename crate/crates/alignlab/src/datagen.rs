//! Synthetic multilingual paired corpora.
//!
//! Each instance has a latent semantic vector; the audio feature is a
//! fixed random linear map of the latent plus noise, and each language's
//! text feature is another fixed map plus a per-language offset and
//! per-language noise. Language index 0 is the English anchor and gets
//! no offset, so the offset scale and per-language sigmas control how
//! far each language drifts from the clean reference.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoders::{read_exact, read_f64, read_u32, read_u64};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

const CORPUS_MAGIC: [u8; 4] = *b"ALNC";
const CORPUS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_instances: usize,
    pub n_languages: usize,
    pub d_latent: usize,
    pub d_audio: usize,
    pub d_text: usize,
    pub audio_noise_sigma: f64,
    /// One sigma per language; larger values make that language harder.
    pub per_language_noise_sigma: Vec<f64>,
    pub language_offset_scale: f64,
    pub seed: u64,
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_instances < 2 {
            return Err(Error::InvalidConfig("n_instances must be >= 2".into()));
        }
        if self.n_languages < 1 {
            return Err(Error::InvalidConfig("n_languages must be >= 1".into()));
        }
        if self.d_latent < 1 || self.d_audio < 1 || self.d_text < 1 {
            return Err(Error::InvalidConfig("all dims must be >= 1".into()));
        }
        if self.per_language_noise_sigma.len() != self.n_languages {
            return Err(Error::InvalidConfig(format!(
                "per_language_noise_sigma has {} entries, expected {}",
                self.per_language_noise_sigma.len(),
                self.n_languages
            )));
        }
        if self.audio_noise_sigma < 0.0
            || self.language_offset_scale < 0.0
            || self.per_language_noise_sigma.iter().any(|s| *s < 0.0)
        {
            return Err(Error::InvalidConfig("sigmas must be nonnegative".into()));
        }
        Ok(())
    }

    /// Desk-scale benchmark corpus: four languages with graded noise so
    /// the hardest language is last, small enough to train in seconds.
    /// English (language 0) is clean; languages 1-2 are moderately
    /// noisy; language 3 is the noisiest and has the worst trained
    /// retrieval quality.
    pub fn default_benchmark() -> Self {
        CorpusConfig {
            n_instances: 200,
            n_languages: 4,
            d_latent: 16,
            d_audio: 64,
            d_text: 64,
            audio_noise_sigma: 0.15,
            per_language_noise_sigma: vec![0.15, 0.45, 0.45, 0.675],
            language_offset_scale: 1.25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn to_u8(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            _ => Err(Error::InvalidConfig(format!("bad split tag {v}"))),
        }
    }
}

/// A multilingual paired corpus: N audio feature vectors and N x K text
/// feature vectors, with language 0 designated English.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub audio_features: Vec<Vec<f64>>,
    /// texts[i][k] is the text feature for instance i in language k.
    pub text_features: Vec<Vec<Vec<f64>>>,
    pub language_names: Vec<String>,
    pub splits: Vec<Split>,
}

impl Corpus {
    pub fn n_instances(&self) -> usize {
        self.audio_features.len()
    }

    pub fn n_languages(&self) -> usize {
        self.language_names.len()
    }

    pub fn d_audio(&self) -> usize {
        self.audio_features[0].len()
    }

    pub fn d_text(&self) -> usize {
        self.text_features[0][0].len()
    }

    /// Instance indices tagged with the given split.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }
}

const LANGUAGE_NAME_POOL: [&str; 8] = [
    "english", "french", "german", "spanish", "dutch", "catalan", "japanese", "chinese",
];

fn language_names(k: usize) -> Vec<String> {
    (0..k)
        .map(|i| {
            LANGUAGE_NAME_POOL
                .get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("lang{}", i + 1))
        })
        .collect()
}

/// Generate a corpus from the latent-factor model; fully deterministic
/// for a given config.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, Stream::Corpus);
    let normal = StandardNormal;
    let draw = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        (0..n).map(|_| normal.sample(rng)).collect()
    };

    // Shared maps and per-language offsets, drawn once.
    let scale = 1.0 / (cfg.d_latent as f64).sqrt();
    let audio_map: Vec<f64> = draw(cfg.d_audio * cfg.d_latent, &mut rng)
        .into_iter()
        .map(|v| v * scale)
        .collect();
    let text_map: Vec<f64> = draw(cfg.d_text * cfg.d_latent, &mut rng)
        .into_iter()
        .map(|v| v * scale)
        .collect();
    let mut offsets: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_languages);
    for k in 0..cfg.n_languages {
        let raw = draw(cfg.d_text, &mut rng);
        if k == 0 {
            offsets.push(vec![0.0; cfg.d_text]); // English anchor
        } else {
            offsets.push(raw);
        }
    }

    let mut audio_features = Vec::with_capacity(cfg.n_instances);
    let mut text_features = Vec::with_capacity(cfg.n_instances);
    for _ in 0..cfg.n_instances {
        let latent = draw(cfg.d_latent, &mut rng);
        let mut audio = mat_vec(&audio_map, &latent, cfg.d_audio, cfg.d_latent);
        for v in &mut audio {
            *v += cfg.audio_noise_sigma * rng.sample::<f64, _>(normal);
        }
        let text_base = mat_vec(&text_map, &latent, cfg.d_text, cfg.d_latent);
        let mut per_lang = Vec::with_capacity(cfg.n_languages);
        for k in 0..cfg.n_languages {
            let sigma = cfg.per_language_noise_sigma[k];
            let mut t = text_base.clone();
            for (j, v) in t.iter_mut().enumerate() {
                *v += cfg.language_offset_scale * offsets[k][j]
                    + sigma * rng.sample::<f64, _>(normal);
            }
            per_lang.push(t);
        }
        audio_features.push(audio);
        text_features.push(per_lang);
    }

    Ok(Corpus {
        audio_features,
        text_features,
        language_names: language_names(cfg.n_languages),
        splits: vec![Split::Train; cfg.n_instances],
    })
}

fn mat_vec(m: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| {
            let row = &m[r * cols..(r + 1) * cols];
            row.iter().zip(x).map(|(a, b)| a * b).sum()
        })
        .collect()
}

/// Assign train/val/test tags by a seeded shuffle. Counts are floors of
/// the fractions; leftovers go to the splits with the largest fractional
/// remainders (ties favoring train, then val).
pub fn split_corpus(corpus: &mut Corpus, fractions: (f64, f64, f64), seed: u64) -> Result<()> {
    let (ft, fv, fe) = fractions;
    if ft < 0.0 || fv < 0.0 || fe < 0.0 {
        return Err(Error::InvalidConfig("split fractions must be >= 0".into()));
    }
    if (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split fractions must sum to 1, got {}",
            ft + fv + fe
        )));
    }
    let n = corpus.n_instances();
    let raw = [ft * n as f64, fv * n as f64, fe * n as f64];
    let mut counts = [raw[0] as usize, raw[1] as usize, raw[2] as usize];
    let mut assigned: usize = counts.iter().sum();
    // Distribute leftover to largest fractional remainders.
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut cursor = 0;
    while assigned < n {
        counts[order[cursor % 3]] += 1;
        assigned += 1;
        cursor += 1;
    }

    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, Stream::Split);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
    for (pos, &idx) in indices.iter().enumerate() {
        corpus.splits[idx] = if pos < counts[0] {
            Split::Train
        } else if pos < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(())
}

/// Write the corpus binary (magic "ALNC", little-endian, instance-major).
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let display = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&display, e))?;
    let mut out = BufWriter::new(file);
    let mut write = |bytes: &[u8]| out.write_all(bytes).map_err(|e| Error::io(&display, e));
    write(&CORPUS_MAGIC)?;
    write(&CORPUS_VERSION.to_le_bytes())?;
    write(&(corpus.n_instances() as u64).to_le_bytes())?;
    write(&(corpus.n_languages() as u64).to_le_bytes())?;
    write(&(corpus.d_audio() as u64).to_le_bytes())?;
    write(&(corpus.d_text() as u64).to_le_bytes())?;
    for name in &corpus.language_names {
        write(&(name.len() as u32).to_le_bytes())?;
        write(name.as_bytes())?;
    }
    for a in &corpus.audio_features {
        for v in a {
            write(&v.to_le_bytes())?;
        }
    }
    for per_lang in &corpus.text_features {
        for t in per_lang {
            for v in t {
                write(&v.to_le_bytes())?;
            }
        }
    }
    for s in &corpus.splits {
        write(&[s.to_u8()])?;
    }
    out.flush().map_err(|e| Error::io(&display, e))
}

/// Read a corpus written by [`save_corpus`]; bit-exact round trip.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut input = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact(&mut input, &mut magic, &display)?;
    if magic != CORPUS_MAGIC {
        return Err(Error::BadMagic {
            path: display,
            expected: CORPUS_MAGIC,
        });
    }
    let version = read_u32(&mut input, &display)?;
    if version != CORPUS_VERSION {
        return Err(Error::VersionMismatch {
            path: display,
            got: version,
            supported: CORPUS_VERSION,
        });
    }
    let n = read_u64(&mut input, &display)? as usize;
    let k = read_u64(&mut input, &display)? as usize;
    let d_audio = read_u64(&mut input, &display)? as usize;
    let d_text = read_u64(&mut input, &display)? as usize;
    let mut language_names = Vec::with_capacity(k);
    for _ in 0..k {
        let len = read_u32(&mut input, &display)? as usize;
        let mut buf = vec![0u8; len];
        read_exact(&mut input, &mut buf, &display)?;
        language_names.push(String::from_utf8(buf).map_err(|e| Error::Parse {
            path: display.clone(),
            line: 0,
            message: format!("bad utf-8 language name: {e}"),
        })?);
    }
    let mut audio_features = Vec::with_capacity(n);
    for _ in 0..n {
        let mut a = Vec::with_capacity(d_audio);
        for _ in 0..d_audio {
            a.push(read_f64(&mut input, &display)?);
        }
        audio_features.push(a);
    }
    let mut text_features = Vec::with_capacity(n);
    for _ in 0..n {
        let mut per_lang = Vec::with_capacity(k);
        for _ in 0..k {
            let mut t = Vec::with_capacity(d_text);
            for _ in 0..d_text {
                t.push(read_f64(&mut input, &display)?);
            }
            per_lang.push(t);
        }
        text_features.push(per_lang);
    }
    let mut splits = Vec::with_capacity(n);
    for _ in 0..n {
        let mut b = [0u8; 1];
        read_exact(&mut input, &mut b, &display)?;
        splits.push(Split::from_u8(b[0])?);
    }
    Ok(Corpus {
        audio_features,
        text_features,
        language_names,
        splits,
    })
}

/// Import externally computed features from plain-text CSV.
///
/// Audio file: one row per instance, `i,v0,v1,...`. Text file: one row
/// per (instance, language), `i,k,v0,v1,...` with 0-based indices.
/// Rows may appear in any order but every (i, k) cell must be present
/// exactly once.
pub fn import_csv(audio_path: &Path, text_path: &Path) -> Result<Corpus> {
    let audio_rows = read_numeric_rows(audio_path, 2)?;
    let text_rows = read_numeric_rows(text_path, 3)?;
    let n = audio_rows.len();
    if n < 2 {
        return Err(Error::InvalidConfig(
            "CSV import requires at least 2 instances".into(),
        ));
    }
    let k = text_rows.len() / n;
    if k == 0 || text_rows.len() != n * k {
        return Err(Error::InvalidConfig(format!(
            "text CSV has {} rows, not a multiple of {} audio instances",
            text_rows.len(),
            n
        )));
    }
    let d_audio = audio_rows[0].1.len();
    let mut audio_features = vec![Vec::new(); n];
    for (line, (idx, values)) in audio_rows.into_iter().enumerate() {
        let i = idx[0] as usize;
        if i >= n || values.len() != d_audio {
            return Err(Error::Parse {
                path: audio_path.display().to_string(),
                line: line + 1,
                message: "inconsistent instance index or dimension".into(),
            });
        }
        audio_features[i] = values;
    }
    let d_text = text_rows[0].1.len();
    let mut text_features = vec![vec![Vec::new(); k]; n];
    for (line, (idx, values)) in text_rows.into_iter().enumerate() {
        let (i, kk) = (idx[0] as usize, idx[1] as usize);
        if i >= n || kk >= k || values.len() != d_text {
            return Err(Error::Parse {
                path: text_path.display().to_string(),
                line: line + 1,
                message: "inconsistent indices or dimension".into(),
            });
        }
        text_features[i][kk] = values;
    }
    for (i, per_lang) in text_features.iter().enumerate() {
        for (kk, t) in per_lang.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "missing text row for instance {i}, language {kk}"
                )));
            }
        }
    }
    Ok(Corpus {
        audio_features,
        text_features,
        language_names: language_names(k),
        splits: vec![Split::Train; n],
    })
}

type IndexedRow = (Vec<u64>, Vec<f64>);

fn read_numeric_rows(path: &Path, n_index_cols: usize) -> Result<Vec<IndexedRow>> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut rows = Vec::new();
    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&display, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: display.clone(),
            line: line_no + 1,
            message,
        };
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() < n_index_cols {
            return Err(parse_err(format!(
                "expected at least {n_index_cols} columns"
            )));
        }
        let idx: Vec<u64> = fields[..n_index_cols - 1]
            .iter()
            .map(|f| f.parse::<u64>().map_err(|e| parse_err(e.to_string())))
            .collect::<Result<_>>()?;
        let values: Vec<f64> = fields[n_index_cols - 1..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| parse_err(e.to_string())))
            .collect::<Result<_>>()?;
        rows.push((idx, values));
    }
    Ok(rows)
}
