use std::fmt;
use std::str::FromStr;

use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// CBHG encoder, pre-nets, mel decoder and post-net.
    Full,
    /// Residual-GRU encoder and decoder without pre-nets or post-net; the
    /// decoder predicts linear frames directly.
    Vanilla,
    /// The full model with its CBHG encoder replaced by a residual GRU stack.
    GruEncoder,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::Vanilla, Variant::GruEncoder];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Vanilla => "vanilla",
            Variant::GruEncoder => "gru_encoder",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Variant::Full),
            "vanilla" => Ok(Variant::Vanilla),
            "gru_encoder" | "gru-encoder" => Ok(Variant::GruEncoder),
            other => Err(ModelError::Config(format!("unknown variant {other:?} (full|vanilla|gru_encoder)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CbhgConfig {
    pub k: usize,
    pub bank_channels: usize,
    /// Widths of the two conv-3 projections (ReLU, then linear).
    pub projection: [usize; 2],
    pub highway_layers: usize,
    pub highway_width: usize,
    /// Units per direction of the bidirectional GRU.
    pub gru_units: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub encoder_prenet: Vec<usize>,
    pub prenet_dropout: f64,
    pub encoder_cbhg: CbhgConfig,
    pub decoder_prenet: Vec<usize>,
    pub attention_rnn: usize,
    pub attention_hidden: usize,
    pub decoder_rnn: usize,
    pub decoder_layers: usize,
    pub mel_bands: usize,
    pub linear_bins: usize,
    pub r: usize,
    pub postnet_cbhg: CbhgConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            vocab_size: crate::text::Charset::default().len(),
            embed_dim: 256,
            encoder_prenet: vec![256, 128],
            prenet_dropout: 0.5,
            encoder_cbhg: CbhgConfig {
                k: 16,
                bank_channels: 128,
                projection: [128, 128],
                highway_layers: 4,
                highway_width: 128,
                gru_units: 128,
            },
            decoder_prenet: vec![256, 128],
            attention_rnn: 256,
            attention_hidden: 256,
            decoder_rnn: 256,
            decoder_layers: 2,
            mel_bands: 80,
            linear_bins: 1025,
            r: 2,
            postnet_cbhg: CbhgConfig {
                k: 8,
                bank_channels: 128,
                projection: [256, 80],
                highway_layers: 4,
                highway_width: 128,
                gru_units: 128,
            },
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration used for toy-corpus training: embedding 64,
    /// conv channels 32, recurrent width 128, r = 2.
    pub fn tiny() -> Self {
        let base = Self::default();
        Self {
            embed_dim: 64,
            encoder_prenet: vec![64, 32],
            encoder_cbhg: CbhgConfig {
                k: 16,
                bank_channels: 32,
                projection: [32, 32],
                highway_layers: 4,
                highway_width: 32,
                gru_units: 32,
            },
            decoder_prenet: vec![64, 32],
            attention_rnn: 128,
            attention_hidden: 128,
            decoder_rnn: 128,
            postnet_cbhg: CbhgConfig {
                k: 8,
                bank_channels: 32,
                projection: [64, 80],
                highway_layers: 4,
                highway_width: 32,
                gru_units: 32,
            },
            ..base
        }
    }

    /// Very small network for finite-difference checks: every width is 8 and
    /// the spectral widths are shrunk so a forward pass costs microseconds.
    pub fn gradcheck() -> Self {
        let cbhg = |proj_out| CbhgConfig {
            k: 3,
            bank_channels: 8,
            projection: [8, proj_out],
            highway_layers: 2,
            highway_width: 8,
            gru_units: 4,
        };
        Self {
            variant: Variant::Full,
            vocab_size: 12,
            embed_dim: 8,
            encoder_prenet: vec![8, 8],
            prenet_dropout: 0.5,
            encoder_cbhg: cbhg(8),
            decoder_prenet: vec![8, 8],
            attention_rnn: 8,
            attention_hidden: 8,
            decoder_rnn: 8,
            decoder_layers: 2,
            mel_bands: 6,
            linear_bins: 9,
            r: 2,
            postnet_cbhg: cbhg(6),
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    /// Width of the frames the decoder predicts and is fed back.
    pub fn decoder_frame_dim(&self) -> usize {
        match self.variant {
            Variant::Vanilla => self.linear_bins,
            _ => self.mel_bands,
        }
    }

    /// Width of each encoder output row.
    pub fn memory_dim(&self) -> usize {
        2 * self.encoder_cbhg.gru_units
    }

    pub fn has_prenets(&self) -> bool {
        self.variant != Variant::Vanilla
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.r < 1 {
            return bad("r must be ≥ 1".into());
        }
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("attention_rnn", self.attention_rnn),
            ("attention_hidden", self.attention_hidden),
            ("decoder_rnn", self.decoder_rnn),
            ("decoder_layers", self.decoder_layers),
            ("mel_bands", self.mel_bands),
            ("linear_bins", self.linear_bins),
        ];
        for (name, v) in dims {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, c) in [("encoder", &self.encoder_cbhg), ("postnet", &self.postnet_cbhg)] {
            if [c.k, c.bank_channels, c.projection[0], c.projection[1], c.highway_width, c.gru_units].contains(&0) {
                return bad(format!("{name} CBHG dimensions must be positive"));
            }
        }
        if self.encoder_prenet.is_empty() || self.encoder_prenet.contains(&0) {
            return bad("encoder_prenet widths must be positive".into());
        }
        if self.decoder_prenet.is_empty() || self.decoder_prenet.contains(&0) {
            return bad("decoder_prenet widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.prenet_dropout) {
            return bad(format!("prenet_dropout {} outside [0,1)", self.prenet_dropout));
        }
        let prenet_out = *self.encoder_prenet.last().expect("nonempty");
        if self.variant == Variant::Full && self.encoder_cbhg.projection[1] != prenet_out {
            return bad(format!(
                "encoder CBHG projection output {} must equal encoder pre-net output {prenet_out} for the residual",
                self.encoder_cbhg.projection[1]
            ));
        }
        if self.variant != Variant::Vanilla && self.postnet_cbhg.projection[1] != self.mel_bands {
            return bad(format!(
                "postnet CBHG projection output {} must equal mel_bands {} for the residual",
                self.postnet_cbhg.projection[1], self.mel_bands
            ));
        }
        Ok(())
    }

    pub fn key_values(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut kv = vec![
            ("variant".to_string(), self.variant.to_string()),
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("embed_dim".into(), self.embed_dim.to_string()),
            ("encoder_prenet".into(), list(&self.encoder_prenet)),
            ("prenet_dropout".into(), self.prenet_dropout.to_string()),
            ("decoder_prenet".into(), list(&self.decoder_prenet)),
            ("attention_rnn".into(), self.attention_rnn.to_string()),
            ("attention_hidden".into(), self.attention_hidden.to_string()),
            ("decoder_rnn".into(), self.decoder_rnn.to_string()),
            ("decoder_layers".into(), self.decoder_layers.to_string()),
            ("mel_bands".into(), self.mel_bands.to_string()),
            ("linear_bins".into(), self.linear_bins.to_string()),
            ("r".into(), self.r.to_string()),
        ];
        for (prefix, c) in [("encoder", &self.encoder_cbhg), ("postnet", &self.postnet_cbhg)] {
            kv.push((format!("{prefix}_k"), c.k.to_string()));
            kv.push((format!("{prefix}_bank_channels"), c.bank_channels.to_string()));
            kv.push((format!("{prefix}_projection"), list(&c.projection)));
            kv.push((format!("{prefix}_highway_layers"), c.highway_layers.to_string()));
            kv.push((format!("{prefix}_highway_width"), c.highway_width.to_string()));
            kv.push((format!("{prefix}_gru_units"), c.gru_units.to_string()));
        }
        kv
    }

    /// Sets one field by its key as listed in [`ModelConfig::key_values`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ModelError> {
        let err = |e: &dyn fmt::Display| ModelError::Config(format!("model.{key} = {value:?}: {e}"));
        let num = |v: &str| v.trim().parse::<usize>().map_err(|e| err(&e));
        let list = |v: &str| v.split(',').map(num).collect::<Result<Vec<_>, _>>();
        let pair = |v: &str| -> Result<[usize; 2], ModelError> {
            let l = list(v)?;
            <[usize; 2]>::try_from(l).map_err(|_| err(&"expected two comma-separated widths"))
        };
        if let Some((prefix, field)) = key.split_once('_').filter(|(p, _)| *p == "encoder" || *p == "postnet") {
            let c = if prefix == "encoder" { &mut self.encoder_cbhg } else { &mut self.postnet_cbhg };
            match field {
                "k" => c.k = num(value)?,
                "bank_channels" => c.bank_channels = num(value)?,
                "projection" => c.projection = pair(value)?,
                "highway_layers" => c.highway_layers = num(value)?,
                "highway_width" => c.highway_width = num(value)?,
                "gru_units" => c.gru_units = num(value)?,
                "prenet" if prefix == "encoder" => self.encoder_prenet = list(value)?,
                _ => return Err(ModelError::Config(format!("unknown key model.{key}"))),
            }
            return Ok(());
        }
        match key {
            "variant" => self.variant = value.parse()?,
            "vocab_size" => self.vocab_size = num(value)?,
            "embed_dim" => self.embed_dim = num(value)?,
            "prenet_dropout" => self.prenet_dropout = value.trim().parse().map_err(|e| err(&e))?,
            "decoder_prenet" => self.decoder_prenet = list(value)?,
            "attention_rnn" => self.attention_rnn = num(value)?,
            "attention_hidden" => self.attention_hidden = num(value)?,
            "decoder_rnn" => self.decoder_rnn = num(value)?,
            "decoder_layers" => self.decoder_layers = num(value)?,
            "mel_bands" => self.mel_bands = num(value)?,
            "linear_bins" => self.linear_bins = num(value)?,
            "r" => self.r = num(value)?,
            _ => return Err(ModelError::Config(format!("unknown key model.{key}"))),
        }
        Ok(())
    }
}
