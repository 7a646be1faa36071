use super::config::CbhgConfig;
use super::layers::{BiGru, Builder, ConvBn, Ctx, Highway, Linear, SeqMask};
use crate::grad::ops::maxpool1d;
use crate::grad::{GradError, Var};

/// Conv bank → max-pool → conv projections → residual → highway → bi-GRU.
#[derive(Clone, Debug)]
pub struct Cbhg {
    pub bank: Vec<ConvBn>,
    pub projections: [ConvBn; 2],
    /// Present when the projection output width differs from the highway width.
    pub highway_input: Option<Linear>,
    pub highways: Vec<Highway>,
    pub gru: BiGru,
    pub input_dim: usize,
}

impl Cbhg {
    pub fn new(b: &mut Builder, name: &str, input_dim: usize, cfg: &CbhgConfig) -> Self {
        let bank = (1..=cfg.k)
            .map(|k| ConvBn::new(b, &format!("{name}.bank{k}"), k, input_dim, cfg.bank_channels, true))
            .collect();
        let stacked = cfg.k * cfg.bank_channels;
        let projections = [
            ConvBn::new(b, &format!("{name}.proj0"), 3, stacked, cfg.projection[0], true),
            ConvBn::new(b, &format!("{name}.proj1"), 3, cfg.projection[0], cfg.projection[1], false),
        ];
        let highway_input = (cfg.projection[1] != cfg.highway_width).then(|| {
            Linear::new(b, &format!("{name}.highway_in"), cfg.projection[1], cfg.highway_width, None)
        });
        let highways = (0..cfg.highway_layers)
            .map(|i| Highway::new(b, &format!("{name}.highway{i}"), cfg.highway_width))
            .collect();
        let gru = BiGru::new(b, &format!("{name}.gru"), cfg.highway_width, cfg.gru_units);
        Self {
            bank,
            projections,
            highway_input,
            highways,
            gru,
            input_dim,
        }
    }

    /// Stacked outputs of every bank convolution, `[(B·T)×(K·channels)]`.
    pub fn conv_bank<'t>(
        &self,
        ctx: &mut Ctx<'_, 't>,
        x: Var<'t>,
        batch: usize,
        mask: Option<&SeqMask>,
    ) -> Result<Var<'t>, GradError> {
        let outs = self
            .bank
            .iter()
            .map(|conv| conv.apply(ctx, x, batch, mask))
            .collect::<Result<Vec<_>, _>>()?;
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            ctx.tape.concat_cols(&outs)
        }
    }

    pub fn apply<'t>(
        &self,
        ctx: &mut Ctx<'_, 't>,
        x: Var<'t>,
        batch: usize,
        lengths: &[usize],
    ) -> Result<Var<'t>, GradError> {
        if x.cols() != self.input_dim {
            return Err(GradError::ShapeMismatch {
                op: "cbhg",
                left: x.shape(),
                right: vec![self.input_dim],
            });
        }
        // padding rows are held at zero through the convolutions; bank outputs
        // are non-negative, so max-pooling against them matches the sequence end
        let mask = SeqMask::new(lengths, x.rows() / batch.max(1));
        let x = match &mask {
            Some(m) => m.apply(x)?,
            None => x,
        };
        let bank = self.conv_bank(ctx, x, batch, mask.as_ref())?;
        let pooled = maxpool1d(bank, batch)?;
        let p = self.projections[0].apply(ctx, pooled, batch, mask.as_ref())?;
        let p = self.projections[1].apply(ctx, p, batch, mask.as_ref())?;
        let mut h = p.add(x)?;
        if let Some(proj) = &self.highway_input {
            h = proj.apply(ctx, h)?;
        }
        for hw in &self.highways {
            h = hw.apply(ctx, h)?;
        }
        self.gru.apply(ctx, h, batch, lengths)
    }

    pub fn output_width(&self) -> usize {
        self.gru.output_width()
    }
}
