use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Named network families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchName {
    /// Four 53-filter 3×3 conv blocks with pooling and dropout; 848-unit head.
    Omniglot4,
    /// 32 5×5 filters then 64 4×4 filters, each pooled; linear head.
    Mnist2,
    /// Four 32-filter 3×3 conv blocks with pooling; 100-unit head.
    Mini4,
    /// Fully connected encoder for small vector inputs.
    Mlp,
}

impl ArchName {
    pub fn as_str(self) -> &'static str {
        match self {
            ArchName::Omniglot4 => "omniglot4",
            ArchName::Mnist2 => "mnist2",
            ArchName::Mini4 => "mini4",
            ArchName::Mlp => "mlp",
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            ArchName::Omniglot4 => 0,
            ArchName::Mnist2 => 1,
            ArchName::Mini4 => 2,
            ArchName::Mlp => 3,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        [ArchName::Omniglot4, ArchName::Mnist2, ArchName::Mini4, ArchName::Mlp]
            .into_iter()
            .find(|a| a.code() == code)
    }
}

impl std::str::FromStr for ArchName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "omniglot4" => Ok(ArchName::Omniglot4),
            "mnist2" => Ok(ArchName::Mnist2),
            "mini4" => Ok(ArchName::Mini4),
            "mlp" => Ok(ArchName::Mlp),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

/// conv (stride 1) → relu → optional max-pool → optional dropout.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub filters: usize,
    pub kernel: usize,
    pub padding: usize,
    /// Pooling window (and stride); 0 disables pooling.
    pub pool: usize,
    /// Dropout probability applied in training mode; 0 disables it.
    pub dropout: f64,
}

/// Encoder layers plus the decoder template shared by every task head.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub name: ArchName,
    pub input_shape: [usize; 3],
    pub conv: Vec<ConvBlock>,
    /// Widths of fully connected encoder layers after the conv stack (relu).
    pub encoder_dense: Vec<usize>,
    /// Hidden widths of each decoder before its linear output layer (relu).
    pub decoder_hidden: Vec<usize>,
}

impl ArchSpec {
    pub fn mnist2() -> Self {
        let block = |filters, kernel| ConvBlock { filters, kernel, padding: 0, pool: 2, dropout: 0.0 };
        ArchSpec {
            name: ArchName::Mnist2,
            input_shape: [1, 28, 28],
            conv: vec![block(32, 5), block(64, 4)],
            encoder_dense: vec![],
            decoder_hidden: vec![],
        }
    }

    pub fn omniglot4() -> Self {
        let block = ConvBlock { filters: 53, kernel: 3, padding: 1, pool: 2, dropout: 0.5 };
        ArchSpec {
            name: ArchName::Omniglot4,
            input_shape: [1, 28, 28],
            conv: vec![block; 4],
            encoder_dense: vec![],
            decoder_hidden: vec![848],
        }
    }

    pub fn mini4() -> Self {
        let block = ConvBlock { filters: 32, kernel: 3, padding: 1, pool: 2, dropout: 0.0 };
        ArchSpec {
            name: ArchName::Mini4,
            input_shape: [3, 84, 84],
            conv: vec![block; 4],
            encoder_dense: vec![],
            decoder_hidden: vec![100],
        }
    }

    /// Fully connected encoder over flattened `input_shape` inputs.
    pub fn mlp(input_shape: [usize; 3], encoder: Vec<usize>, decoder_hidden: Vec<usize>) -> Self {
        ArchSpec {
            name: ArchName::Mlp,
            input_shape,
            conv: vec![],
            encoder_dense: encoder,
            decoder_hidden,
        }
    }

    /// Default spec for `name`; `Mlp` gets one 64-unit layer over `input_shape`.
    pub fn named(name: ArchName, input_shape: Option<[usize; 3]>) -> Self {
        let mut spec = match name {
            ArchName::Mnist2 => ArchSpec::mnist2(),
            ArchName::Omniglot4 => ArchSpec::omniglot4(),
            ArchName::Mini4 => ArchSpec::mini4(),
            ArchName::Mlp => ArchSpec::mlp([1, 1, 1], vec![64], vec![]),
        };
        if let Some(s) = input_shape {
            spec.input_shape = s;
        }
        spec
    }

    /// `[C, H, W]` after each conv block, starting from the input.
    pub fn conv_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut shapes = vec![self.input_shape];
        let [_, mut h, mut w] = self.input_shape;
        for (i, b) in self.conv.iter().enumerate() {
            let out = |x: usize| (x + 2 * b.padding).checked_sub(b.kernel).map(|v| v + 1);
            let (Some(oh), Some(ow)) = (out(h), out(w)) else {
                return Err(Error::Shape(format!(
                    "conv block {i}: kernel {} exceeds {h}×{w} input",
                    b.kernel
                )));
            };
            (h, w) = (oh, ow);
            if let (Some(ph), Some(pw)) = (h.checked_div(b.pool), w.checked_div(b.pool)) {
                (h, w) = (ph, pw);
            }
            if h == 0 || w == 0 {
                return Err(Error::Shape(format!(
                    "conv block {i}: pooling reduces the feature map to nothing"
                )));
            }
            shapes.push([b.filters, h, w]);
        }
        Ok(shapes)
    }

    /// Width of the flattened encoder output `h = F(x)`.
    pub fn feature_dim(&self) -> Result<usize> {
        let [c, h, w] = *self.conv_shapes()?.last().expect("input shape present");
        Ok(self.encoder_dense.last().copied().unwrap_or(c * h * w))
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.input_shape.contains(&0) {
            return Err(Error::Shape(format!("input shape {:?}", self.input_shape)));
        }
        for b in &self.conv {
            if b.filters == 0 || b.kernel == 0 || !(0.0..1.0).contains(&b.dropout) {
                return Err(Error::Parameter(format!("invalid conv block {b:?}")));
            }
        }
        if self.encoder_dense.contains(&0) || self.decoder_hidden.contains(&0) {
            return Err(Error::Parameter("dense layer of width 0".into()));
        }
        self.feature_dim().map(|_| ())
    }
}
