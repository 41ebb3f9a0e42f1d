use std::fmt;
use std::str::FromStr;

use crate::error::{Result, SegError};
use crate::labels::NUM_CLASSES;

/// FCN fusion stride: the finest pooling level whose score map is fused.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FcnStride {
    S32,
    S16,
    S8,
}

impl FcnStride {
    pub fn value(self) -> usize {
        match self {
            FcnStride::S32 => 32,
            FcnStride::S16 => 16,
            FcnStride::S8 => 8,
        }
    }

    pub fn from_value(v: usize) -> Result<Self> {
        match v {
            32 => Ok(FcnStride::S32),
            16 => Ok(FcnStride::S16),
            8 => Ok(FcnStride::S8),
            other => Err(SegError::InvalidArgument(format!(
                "invalid FCN stride {other} (expected 32, 16 or 8)"
            ))),
        }
    }

    /// Number of score maps fused (1 for FCN32, 3 for FCN8).
    pub fn fused_levels(self) -> usize {
        match self {
            FcnStride::S32 => 1,
            FcnStride::S16 => 2,
            FcnStride::S8 => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Fcn(FcnStride),
    Segnet,
    Unet,
    Resunet,
}

impl Family {
    pub const NAMES: [&'static str; 6] = ["unet", "resunet", "segnet", "fcn8", "fcn16", "fcn32"];

    /// Short name as used on the command line (`fcn16`, `resunet`, ...).
    pub fn name(self) -> &'static str {
        match self {
            Family::Fcn(FcnStride::S32) => "fcn32",
            Family::Fcn(FcnStride::S16) => "fcn16",
            Family::Fcn(FcnStride::S8) => "fcn8",
            Family::Segnet => "segnet",
            Family::Unet => "unet",
            Family::Resunet => "resunet",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = SegError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "unet" => Family::Unet,
            "resunet" => Family::Resunet,
            "segnet" => Family::Segnet,
            "fcn8" => Family::Fcn(FcnStride::S8),
            "fcn16" => Family::Fcn(FcnStride::S16),
            "fcn32" => Family::Fcn(FcnStride::S32),
            other => {
                return Err(SegError::InvalidArgument(format!(
                    "unknown architecture `{other}` (valid: {})",
                    Family::NAMES.join(", ")
                )))
            }
        })
    }
}

/// FCN encoders always have five pooling stages.
pub const FCN_STAGES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ArchitectureSpec {
    pub family: Family,
    pub depth: usize,
    pub base_filters: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub input_size: usize,
}

impl ArchitectureSpec {
    /// Defaults: depth 4 (5 for FCN), 64 base filters, RGB input, 5 classes, 256².
    pub fn new(family: Family) -> Self {
        ArchitectureSpec {
            family,
            depth: if matches!(family, Family::Fcn(_)) { FCN_STAGES } else { 4 },
            base_filters: 64,
            in_channels: 3,
            num_classes: NUM_CLASSES,
            input_size: 256,
        }
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn with_base_filters(mut self, base: usize) -> Self {
        self.base_filters = base;
        self
    }

    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    pub fn with_classes(mut self, classes: usize) -> Self {
        self.num_classes = classes;
        self
    }

    pub fn with_in_channels(mut self, c: usize) -> Self {
        self.in_channels = c;
        self
    }

    /// Spatial sizes must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.depth
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SegError::InvalidArgument(msg));
        if self.depth == 0 || self.depth > 12 {
            return bad(format!("depth must be in 1..=12, got {}", self.depth));
        }
        if let Family::Fcn(_) = self.family {
            if self.depth != FCN_STAGES {
                return bad(format!(
                    "FCN encoders have {FCN_STAGES} stages, got depth {}",
                    self.depth
                ));
            }
        }
        if self.base_filters == 0 || self.in_channels == 0 {
            return bad("base_filters and in_channels must be positive".into());
        }
        if self.base_filters.checked_shl(self.depth as u32).is_none() {
            return bad("base_filters · 2^depth overflows".into());
        }
        if !(2..=256).contains(&self.num_classes) {
            return bad(format!("num_classes must be in 2..=256, got {}", self.num_classes));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(self.divisor()) {
            return bad(format!(
                "input_size {} is not divisible by 2^{} = {}",
                self.input_size,
                self.depth,
                self.divisor()
            ));
        }
        Ok(())
    }

    /// Filter count of every encoder block, including the bottleneck for
    /// the U-Net families.
    pub fn encoder_filters(&self) -> Vec<usize> {
        let b = self.base_filters;
        match self.family {
            Family::Unet | Family::Resunet => (0..=self.depth).map(|k| b << k).collect(),
            Family::Segnet => (0..self.depth).map(|k| b << k).collect(),
            Family::Fcn(_) => (0..FCN_STAGES).map(|k| b << k.min(3)).collect(),
        }
    }

    /// Trainable parameter count derived from the layer formulas.
    pub fn expected_parameter_count(&self) -> usize {
        let conv = |i: usize, o: usize, k: usize| k * k * i * o + o;
        let plain = |i: usize, o: usize| conv(i, o, 3) + conv(o, o, 3);
        let residual = |i: usize, o: usize| conv(i, o, 1) + 3 * conv(o, o, 3) + 2 * (2 * o);
        let k = self.num_classes;
        let f = self.encoder_filters();
        match self.family {
            Family::Unet | Family::Resunet => {
                let block = |i, o| {
                    if self.family == Family::Unet {
                        plain(i, o)
                    } else {
                        residual(i, o)
                    }
                };
                let mut total = block(self.in_channels, f[0]);
                for lvl in 1..=self.depth {
                    total += block(f[lvl - 1], f[lvl]);
                }
                for lvl in 0..self.depth {
                    // up: 2×2 deconv f[lvl+1] → f[lvl]; then block on the concat
                    total += 4 * f[lvl + 1] * f[lvl] + f[lvl];
                    total += block(2 * f[lvl], f[lvl]);
                }
                total + conv(f[0], k, 1)
            }
            Family::Segnet => {
                let mut total = plain(self.in_channels, f[0]);
                for lvl in 1..self.depth {
                    total += plain(f[lvl - 1], f[lvl]);
                }
                for lvl in 0..self.depth {
                    total += plain(f[lvl], f[lvl.saturating_sub(1)]);
                }
                total + conv(f[0], k, 1)
            }
            Family::Fcn(stride) => {
                let mut total = plain(self.in_channels, f[0]);
                for s in 1..FCN_STAGES {
                    total += plain(f[s - 1], f[s]);
                }
                let levels = stride.fused_levels();
                // score heads on the last `levels` stages
                total += (0..levels).map(|j| conv(f[FCN_STAGES - 1 - j], k, 1)).sum::<usize>();
                // 2× fusion deconvs, then the final ×stride deconv
                total += (levels - 1) * (4 * k * k + k);
                let s = stride.value();
                total + s * s * k * k + k
            }
        }
    }

    /// `key=value` lines in a fixed order.
    pub fn to_canonical_text(&self) -> String {
        let mut s = String::new();
        match self.family {
            Family::Fcn(stride) => {
                s.push_str("family=fcn\n");
                s.push_str(&format!("stride={}\n", stride.value()));
            }
            other => s.push_str(&format!("family={}\n", other.name())),
        }
        s.push_str(&format!(
            "depth={}\nbase_filters={}\nin_channels={}\nnum_classes={}\ninput_size={}\n",
            self.depth, self.base_filters, self.in_channels, self.num_classes, self.input_size
        ));
        s
    }

    pub fn from_canonical_text(text: &str) -> Result<Self> {
        let mut family = None;
        let mut stride = None;
        let mut fields = [None; 5];
        const KEYS: [&str; 5] = ["depth", "base_filters", "in_channels", "num_classes", "input_size"];
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| SegError::format(format!("spec line `{line}` is not key=value")))?;
            let num = || {
                value
                    .parse::<usize>()
                    .map_err(|_| SegError::format(format!("spec value `{value}` for `{key}` is not an integer")))
            };
            match key {
                "family" => family = Some(value.to_string()),
                "stride" => stride = Some(num()?),
                k => {
                    let slot = KEYS
                        .iter()
                        .position(|&x| x == k)
                        .ok_or_else(|| SegError::format(format!("unknown spec key `{k}`")))?;
                    fields[slot] = Some(num()?);
                }
            }
        }
        let family = match (family.as_deref(), stride) {
            (Some("fcn"), Some(s)) => Family::Fcn(FcnStride::from_value(s)?),
            (Some("fcn"), None) => return Err(SegError::format("fcn spec without stride")),
            (Some(name), None) => name.parse()?,
            (Some(_), Some(_)) => return Err(SegError::format("stride given for a non-FCN family")),
            (None, _) => return Err(SegError::format("spec without family")),
        };
        let get = |i: usize| fields[i].ok_or_else(|| SegError::format(format!("spec without `{}`", KEYS[i])));
        let spec = ArchitectureSpec {
            family,
            depth: get(0)?,
            base_filters: get(1)?,
            in_channels: get(2)?,
            num_classes: get(3)?,
            input_size: get(4)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}
