//! A loaded transformer behind the [`MaskedLm`] boundary.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{VarBuilder, VarMap};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simile_core::lm::{AlignedEncoding, MaskedLm, DEFAULT_MAX_LEN, MASK, UNK};
use simile_core::sentiment::checksum;
use simile_core::LmError;

use crate::config::{Family, ModelConfig};
use crate::encoder::Encoder;
use crate::error::{ModelError, Result};
use crate::tokenizer::Tokenizer;

/// Name of the weights file inside a model directory.
pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const CONFIG_FILE: &str = "config.json";

pub struct Transformer {
    name: String,
    config: ModelConfig,
    tokenizer: Tokenizer,
    varmap: VarMap,
    encoder: Encoder,
    device: Device,
    max_len: usize,
}

fn canonical_name(key: &str, family: Family) -> String {
    let key = key
        .replace("LayerNorm.gamma", "LayerNorm.weight")
        .replace("LayerNorm.beta", "LayerNorm.bias");
    let prefix = match family {
        Family::Bert => "bert.",
        Family::Roberta => "roberta.",
    };
    if key.starts_with("embeddings.") || key.starts_with("encoder.") {
        format!("{prefix}{key}")
    } else {
        key
    }
}

fn wanted(name: &str, family: Family) -> bool {
    let base = match family {
        Family::Bert => "bert.",
        Family::Roberta => "roberta.",
    };
    let Some(rest) = name.strip_prefix(base) else {
        return match family {
            Family::Bert => {
                name.starts_with("cls.predictions.transform.") || name == "cls.predictions.bias"
            }
            Family::Roberta => {
                name.starts_with("lm_head.dense.") || name.starts_with("lm_head.layer_norm.") || name == "lm_head.bias"
            }
        };
    };
    rest.starts_with("encoder.layer.")
        || ["word", "position", "token_type"]
            .iter()
            .any(|k| rest == format!("embeddings.{k}_embeddings.weight"))
        || rest.starts_with("embeddings.LayerNorm.")
}

fn find_weights(dir: &Path) -> Result<PathBuf> {
    let direct = dir.join(WEIGHTS_FILE);
    if direct.exists() {
        return Ok(direct);
    }
    let entries = fs::read_dir(dir).map_err(|e| ModelError::io(dir, e))?;
    let mut found: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "safetensors"))
        .collect();
    found.sort();
    found.into_iter().next().ok_or_else(|| ModelError::Format {
        path: dir.into(),
        message: format!("no {WEIGHTS_FILE}"),
    })
}

impl Transformer {
    /// Loads `config.json`, the tokenizer files and safetensors weights.
    pub fn load(dir: &Path) -> Result<Transformer> {
        let config = ModelConfig::load(&dir.join(CONFIG_FILE))?;
        let family = config.family()?;
        let tokenizer = Tokenizer::from_dir(dir)?;
        let device = Device::Cpu;
        let weights = find_weights(dir)?;
        let tensors = candle_core::safetensors::load(&weights, &device)?;
        let varmap = VarMap::new();
        {
            let mut data = varmap.data().lock().unwrap();
            for (key, t) in tensors {
                let name = canonical_name(&key, family);
                if wanted(&name, family) {
                    data.insert(name, Var::from_tensor(&t.to_dtype(DType::F32)?)?);
                }
            }
        }
        let before: BTreeSet<String> = varmap.data().lock().unwrap().keys().cloned().collect();
        let encoder = Encoder::new(&config, VarBuilder::from_varmap(&varmap, DType::F32, &device))?;
        let missing: Vec<String> = varmap
            .data()
            .lock()
            .unwrap()
            .keys()
            .filter(|k| !before.contains(*k))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(ModelError::MissingTensors(missing.join(", ")));
        }
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into());
        Ok(Transformer::assemble(name, config, tokenizer, varmap, encoder, device))
    }

    /// A freshly initialised model: weights uniform with standard deviation
    /// 0.02, layer norms at identity, biases zero.
    pub fn random(config: ModelConfig, tokenizer: Tokenizer, dtype: DType, seed: u64) -> Result<Transformer> {
        let device = Device::Cpu;
        let varmap = VarMap::new();
        let encoder = Encoder::new(&config, VarBuilder::from_varmap(&varmap, dtype, &device))?;
        reinitialise(&varmap, seed)?;
        Ok(Transformer::assemble("random".into(), config, tokenizer, varmap, encoder, device))
    }

    fn assemble(
        name: String,
        config: ModelConfig,
        tokenizer: Tokenizer,
        varmap: VarMap,
        encoder: Encoder,
        device: Device,
    ) -> Transformer {
        let max_len = DEFAULT_MAX_LEN.min(config.max_position_embeddings - config.position_offset());
        Transformer {
            name,
            config,
            tokenizer,
            varmap,
            encoder,
            device,
            max_len,
        }
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }

    pub fn with_max_len(mut self, max_len: usize) -> Self {
        self.max_len = max_len;
        self
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.encoder.word_embeddings().dtype()
    }

    /// Writes weights, config and tokenizer into `dir` atomically: files go
    /// to a sibling temporary directory that is then renamed into place.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let parent = dir.parent().unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| ModelError::io(parent, e))?;
        let tmp = parent.join(format!(
            ".{}.tmp",
            dir.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
        ));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| ModelError::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| ModelError::io(&tmp, e))?;
        self.save_weights(&tmp.join(WEIGHTS_FILE))?;
        let cfg = serde_json::to_string_pretty(&self.config).expect("config serializes");
        fs::write(tmp.join(CONFIG_FILE), cfg).map_err(|e| ModelError::io(&tmp, e))?;
        self.tokenizer.save(&tmp)?;
        if let Tokenizer::WordPiece(_) = self.tokenizer {
            let flag = serde_json::json!({ "do_lower_case": self.lowercase() });
            fs::write(tmp.join("tokenizer_config.json"), flag.to_string()).map_err(|e| ModelError::io(&tmp, e))?;
        }
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| ModelError::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| ModelError::io(dir, e))
    }

    fn lowercase(&self) -> bool {
        // a lowercasing vocabulary maps "A" and "a" alike
        self.tokenizer.word_pieces("A", true) == self.tokenizer.word_pieces("a", true)
    }

    fn save_weights(&self, path: &Path) -> Result<()> {
        let data = self.varmap.data().lock().unwrap();
        let tensors: HashMap<String, Tensor> = data
            .iter()
            .filter(|(k, _)| wanted(k, self.config.family().unwrap()))
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().to_dtype(DType::F32)?)))
            .collect::<Result<_>>()?;
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    /// Copies of every parameter, for restoring after a failed step.
    pub fn snapshot(&self) -> Result<HashMap<String, Tensor>> {
        let data = self.varmap.data().lock().unwrap();
        data.iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, snapshot: &HashMap<String, Tensor>) -> Result<()> {
        let data = self.varmap.data().lock().unwrap();
        for (k, v) in data.iter() {
            if let Some(t) = snapshot.get(k) {
                v.set(t)?;
            }
        }
        Ok(())
    }

    /// Subtoken ids with specials, plus word ranges and mask positions.
    pub fn encode_words(&self, words: &[String], mask_width: usize) -> AlignedEncoding {
        let sp = self.tokenizer.specials();
        let mut ids = vec![sp.cls];
        let mut ranges = Vec::with_capacity(words.len());
        let mut masks = Vec::new();
        for (i, w) in words.iter().enumerate() {
            let start = ids.len();
            if w == MASK {
                for _ in 0..mask_width.max(1) {
                    masks.push(ids.len());
                    ids.push(sp.mask);
                }
            } else if w == UNK {
                ids.push(sp.unk);
            } else {
                let pieces = self.tokenizer.word_pieces(w, i == 0);
                if pieces.is_empty() {
                    ids.push(sp.unk);
                } else {
                    ids.extend(pieces);
                }
            }
            ranges.push(start..ids.len());
        }
        ids.push(sp.sep);
        AlignedEncoding {
            subtoken_ids: ids,
            word_to_subtoken: ranges,
            mask_positions: masks,
            hidden_dim: self.config.hidden_size,
        }
    }

    /// Pads sequences into `[batch, len]` ids and an attention mask.
    pub fn batch_tensors(&self, seqs: &[&[u32]]) -> Result<(Tensor, Tensor)> {
        let n = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let pad = self.tokenizer.specials().pad;
        let mut ids = Vec::with_capacity(seqs.len() * n);
        let mut mask = Vec::with_capacity(seqs.len() * n);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(pad, n - s.len()));
            mask.extend(std::iter::repeat_n(1u32, s.len()));
            mask.extend(std::iter::repeat_n(0u32, n - s.len()));
        }
        let shape = (seqs.len(), n);
        Ok((
            Tensor::from_vec(ids, shape, &self.device)?,
            Tensor::from_vec(mask, shape, &self.device)?,
        ))
    }

    fn run(&self, enc: &AlignedEncoding) -> Result<Tensor> {
        if enc.len() > self.max_len {
            return Err(LmError::TooLong {
                len: enc.len(),
                max: self.max_len,
            }
            .into());
        }
        let ids = Tensor::from_slice(&enc.subtoken_ids, (1, enc.len()), &self.device)?;
        Ok(self.encoder.forward(&ids, None)?.squeeze(0)?)
    }
}

fn to_array(t: &Tensor) -> Result<Array2<f32>> {
    let (r, c) = t.dims2()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(Array2::from_shape_vec((r, c), v).expect("shape matches tensor"))
}

/// Overwrites every variable with seeded values.
pub(crate) fn reinitialise(varmap: &VarMap, seed: u64) -> Result<()> {
    let data = varmap.data().lock().unwrap();
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half_width = 0.02 * 3f64.sqrt();
    for name in names {
        let var = &data[name];
        let n = var.elem_count();
        let values: Vec<f64> = if name.ends_with("LayerNorm.weight") || name.ends_with("layer_norm.weight") {
            vec![1.0; n]
        } else if name.ends_with("bias") {
            vec![0.0; n]
        } else {
            (0..n).map(|_| rng.gen_range(-half_width..half_width)).collect()
        };
        let t = Tensor::from_vec(values, var.shape(), var.device())?.to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}

impl MaskedLm for Transformer {
    fn name(&self) -> &str {
        &self.name
    }

    fn hidden_dim(&self) -> usize {
        self.config.hidden_size
    }

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn align(&self, words: &[String], mask_width: usize) -> Result<AlignedEncoding, LmError> {
        Ok(self.encode_words(words, mask_width))
    }

    fn hidden_states(&self, enc: &AlignedEncoding) -> Result<Array2<f32>, LmError> {
        Ok(to_array(&self.run(enc)?)?)
    }

    fn mask_logits(&self, enc: &AlignedEncoding) -> Result<Array2<f32>, LmError> {
        let hidden = self.run(enc)?;
        let idx: Vec<u32> = enc.mask_positions.iter().map(|&p| p as u32).collect();
        let idx = Tensor::from_vec(idx, enc.mask_positions.len(), &self.device).map_err(ModelError::from)?;
        let rows = hidden.index_select(&idx, 0).map_err(ModelError::from)?;
        Ok(to_array(&self.encoder.mlm_logits(&rows)?)?)
    }

    fn word_pieces(&self, word: &str) -> Vec<u32> {
        self.tokenizer.word_pieces(word, false)
    }

    fn unk_id(&self) -> Option<u32> {
        Some(self.tokenizer.specials().unk)
    }

    fn input_embedding(&self, id: u32) -> Result<Vec<f32>, LmError> {
        if id as usize >= self.config.vocab_size {
            return Err(LmError::Runtime(format!("token id {id} out of range")));
        }
        let row = self
            .encoder
            .word_embeddings()
            .get(id as usize)
            .and_then(|r| r.to_dtype(DType::F32))
            .and_then(|r| r.to_vec1::<f32>())
            .map_err(ModelError::from)?;
        Ok(row)
    }

    fn parameter_checksum(&self) -> Option<u64> {
        let data = self.varmap.data().lock().ok()?;
        let mut names: Vec<&String> = data.keys().filter(|k| !k.starts_with("ke.")).collect();
        names.sort();
        let buffers: Vec<Vec<f32>> = names
            .iter()
            .map(|n| {
                data[*n]
                    .as_tensor()
                    .to_dtype(DType::F32)
                    .and_then(|t| t.flatten_all())
                    .and_then(|t| t.to_vec1::<f32>())
            })
            .collect::<candle_core::Result<_>>()
            .ok()?;
        Some(checksum(buffers.iter().map(Vec::as_slice)))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::tokenizer::WordPiece;
    use simile_core::lm::{encode, mask_logprobs};

    pub(crate) const WORDS: &[&str] = &[
        "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "the", "toddler", "was", "running", "around", "as", "busy", "a",
        "bee", ".", "idle", "yellow", "messy", "snail", "slow", "man", "is", "fast", "deer", "he", "old", "quick",
        "straw", "##berry",
    ];

    pub(crate) fn tiny(dtype: DType, seed: u64) -> Transformer {
        let tok = Tokenizer::WordPiece(WordPiece::from_tokens(WORDS).unwrap());
        Transformer::random(ModelConfig::tiny(WORDS.len(), 8, 2, 2), tok, dtype, seed).unwrap()
    }

    fn words(s: &str) -> Vec<String> {
        s.split(' ').map(String::from).collect()
    }

    #[test]
    fn alignment_and_shapes() {
        let m = tiny(DType::F32, 0);
        let w = words("the toddler was as [MASK] as a strawberry .");
        let enc = m.align(&w, 1).unwrap();
        assert!(enc.is_well_formed());
        assert_eq!(enc.subtoken_ids.first(), Some(&2));
        assert_eq!(enc.word_to_subtoken[7], 8..10);
        let (_, h) = encode(&m, &w).unwrap();
        assert_eq!(h.dim(), (enc.len(), 8));
        let lp = mask_logprobs(&m, &w).unwrap();
        assert_eq!(lp.len(), WORDS.len());
        let total: f64 = lp.iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-5);
    }

    #[test]
    fn padding_does_not_change_states() {
        let m = tiny(DType::F64, 1);
        let a = m.encode_words(&words("the old man is slow"), 1).subtoken_ids;
        let b = m.encode_words(&words("he is fast"), 1).subtoken_ids;
        let (ids, mask) = m.batch_tensors(&[&a, &b]).unwrap();
        let batched = m.encoder().forward(&ids, Some(&mask)).unwrap();
        let alone = m.encoder().forward(&Tensor::from_slice(&b, (1, b.len()), m.device()).unwrap(), None).unwrap();
        let x = batched.get(1).unwrap().narrow(0, 0, b.len()).unwrap();
        let diff = (x - alone.squeeze(0).unwrap()).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn save_and_reload_round_trip() {
        let m = tiny(DType::F32, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        m.save(&path).unwrap();
        let back = Transformer::load(&path).unwrap();
        assert_eq!(m.parameter_checksum(), back.parameter_checksum());
        let w = words("the man is as [MASK] as a snail");
        assert_eq!(mask_logprobs(&m, &w).unwrap(), mask_logprobs(&back, &w).unwrap());
    }

    #[test]
    fn missing_tensor_reported() {
        let m = tiny(DType::F32, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        m.save(&path).unwrap();
        let weights = path.join(WEIGHTS_FILE);
        let mut t = candle_core::safetensors::load(&weights, &Device::Cpu).unwrap();
        t.remove("cls.predictions.bias");
        candle_core::safetensors::save(&t, &weights).unwrap();
        let err = Transformer::load(&path).err().unwrap();
        assert!(err.to_string().contains("cls.predictions.bias"));
    }

    #[test]
    fn legacy_names_and_seeding() {
        assert_eq!(
            canonical_name("embeddings.LayerNorm.gamma", Family::Bert),
            "bert.embeddings.LayerNorm.weight"
        );
        assert!(!wanted("bert.pooler.dense.weight", Family::Bert));
        assert!(wanted("lm_head.bias", Family::Roberta));
        assert_eq!(tiny(DType::F32, 5).parameter_checksum(), tiny(DType::F32, 5).parameter_checksum());
        assert_ne!(tiny(DType::F32, 5).parameter_checksum(), tiny(DType::F32, 6).parameter_checksum());
    }
}
