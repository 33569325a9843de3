use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModuleVariant {
    /// Channel shift, then per-group up/down/left/right address shifts, then
    /// GConv2 (3 groups).
    AddressBased,
    /// GConv2 is the fused enhanced group convolution (4 groups).
    AddressEnhanced,
}

impl ModuleVariant {
    pub fn groups(self) -> usize {
        match self {
            ModuleVariant::AddressBased => 3,
            ModuleVariant::AddressEnhanced => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shortcut {
    /// `out = x + branch`.
    Add,
    /// `out = concat(x, branch)` at the same resolution.
    Concat,
    /// `out = concat(avg_pool_2x2(x), branch)`.
    PooledConcat,
}

/// `GConv1 -> BN -> ReLU -> shift -> GConv2 -> BN`, joined to the shortcut.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleConfig {
    pub variant: ModuleVariant,
    pub c_in: usize,
    pub c_out: usize,
    /// Intermediate width is `expansion * c_in`.
    pub expansion: usize,
    pub stride: usize,
}

impl ModuleConfig {
    pub fn groups(&self) -> usize {
        self.variant.groups()
    }

    pub fn intermediate(&self) -> usize {
        self.expansion * self.c_in
    }

    pub fn shortcut(&self) -> Shortcut {
        match (self.stride, self.c_in == self.c_out) {
            (1, true) => Shortcut::Add,
            (1, false) => Shortcut::Concat,
            _ => Shortcut::PooledConcat,
        }
    }

    /// Channels produced by GConv2.
    pub fn branch_out(&self) -> usize {
        match self.shortcut() {
            Shortcut::Add => self.c_out,
            _ => self.c_out.saturating_sub(self.c_in),
        }
    }

    /// Channels moved by the channel shift: half a group.
    pub fn shift_channels(&self) -> usize {
        self.intermediate() / self.groups() / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let g = self.groups();
        if self.c_in == 0 || self.c_out == 0 || self.expansion == 0 {
            return bad(format!("{self:?}: widths and expansion must be positive"));
        }
        if self.stride != 1 && self.stride != 2 {
            return bad(format!("stride {} (expected 1 or 2)", self.stride));
        }
        if self.shortcut() != Shortcut::Add && self.c_out <= self.c_in {
            return bad(format!(
                "concat shortcut needs c_out > c_in, got {} -> {}",
                self.c_in, self.c_out
            ));
        }
        for (what, v) in [
            ("c_in", self.c_in),
            ("intermediate", self.intermediate()),
            ("branch", self.branch_out()),
        ] {
            if v % g != 0 {
                return bad(format!("{what} = {v} is not divisible by {g} groups"));
            }
        }
        if self.variant == ModuleVariant::AddressBased && self.intermediate() / g < 4 {
            return bad(format!(
                "address-based shift needs at least 4 channels per group, got {}",
                self.intermediate() / g
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemConfig {
    pub c_out: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub modules: Vec<ModuleConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub input: InputShape,
    pub stem: StemConfig,
    pub stages: Vec<Stage>,
    pub classes: usize,
}

/// Names accepted by [`build_network`].
pub const NETWORK_NAMES: [&str; 7] = [
    "addressnet-20",
    "addressnet-32",
    "addressnet-44",
    "enhanced-20",
    "enhanced-32",
    "enhanced-44",
    "enhanced-a",
];

fn cifar(name: &str, variant: ModuleVariant, stem: usize, widths: [usize; 3], reps: usize) -> NetworkSpec {
    let mut c_in = stem;
    let stages = widths
        .iter()
        .enumerate()
        .map(|(i, &c_out)| {
            let modules = (0..reps)
                .map(|r| ModuleConfig {
                    variant,
                    c_in: if r == 0 { c_in } else { c_out },
                    c_out,
                    expansion: 3,
                    stride: if r == 0 && i > 0 { 2 } else { 1 },
                })
                .collect();
            c_in = c_out;
            Stage {
                name: format!("stage{}", i + 1),
                modules,
            }
        })
        .collect();
    NetworkSpec {
        name: name.to_string(),
        input: InputShape { c: 3, h: 32, w: 32 },
        stem: StemConfig { c_out: stem, stride: 1 },
        stages,
        classes: 100,
    }
}

/// (stride, expansion, repeats)
type Run = (usize, usize, usize);

fn enhanced_a() -> NetworkSpec {
    // (width, runs)
    let plan: [(usize, [Run; 2]); 4] = [
        (96, [(2, 4, 1), (1, 3, 3)]),
        (192, [(2, 3, 1), (1, 2, 4)]),
        (384, [(2, 2, 1), (1, 2, 5)]),
        (768, [(2, 2, 1), (1, 2, 3)]),
    ];
    let mut c_in = 32;
    let stages = plan
        .iter()
        .enumerate()
        .map(|(i, (c_out, rows))| {
            let mut modules = Vec::new();
            for &(stride, expansion, reps) in rows {
                for _ in 0..reps {
                    modules.push(ModuleConfig {
                        variant: ModuleVariant::AddressEnhanced,
                        c_in,
                        c_out: *c_out,
                        expansion,
                        stride,
                    });
                    c_in = *c_out;
                }
            }
            Stage {
                name: format!("stage{}", i + 1),
                modules,
            }
        })
        .collect();
    NetworkSpec {
        name: "enhanced-a".into(),
        input: InputShape { c: 3, h: 224, w: 224 },
        stem: StemConfig { c_out: 32, stride: 2 },
        stages,
        classes: 1000,
    }
}

/// Spec of a named network. Depth names count weighted layers.
pub fn build_network(name: &str) -> Result<NetworkSpec> {
    use ModuleVariant::*;
    let spec = match name {
        "addressnet-20" => cifar(name, AddressBased, 36, [48, 60, 96], 3),
        "addressnet-32" => cifar(name, AddressBased, 36, [48, 60, 96], 5),
        "addressnet-44" => cifar(name, AddressBased, 36, [48, 60, 96], 7),
        "enhanced-20" => cifar(name, AddressEnhanced, 16, [48, 96, 192], 3),
        "enhanced-32" => cifar(name, AddressEnhanced, 16, [48, 96, 192], 5),
        "enhanced-44" => cifar(name, AddressEnhanced, 16, [48, 96, 192], 7),
        "enhanced-a" => enhanced_a(),
        _ => return Err(Error::UnknownNetwork(name.to_string())),
    };
    spec.validate()?;
    Ok(spec)
}

/// Spatial size of every module's input and output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModuleShape {
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl NetworkSpec {
    pub fn with_input(mut self, h: usize, w: usize) -> Self {
        self.input.h = h;
        self.input.w = w;
        self
    }

    pub fn with_classes(mut self, classes: usize) -> Self {
        self.classes = classes;
        self
    }

    pub fn modules(&self) -> impl Iterator<Item = (usize, usize, &ModuleConfig)> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(s, st)| st.modules.iter().enumerate().map(move |(m, cfg)| (s, m, cfg)))
    }

    pub fn module_count(&self) -> usize {
        self.stages.iter().map(|s| s.modules.len()).sum()
    }

    /// Weighted layers: stem, two group convolutions per module, classifier.
    pub fn depth(&self) -> usize {
        2 * self.module_count() + 2
    }

    pub fn final_channels(&self) -> usize {
        self.stages
            .last()
            .and_then(|s| s.modules.last())
            .map_or(self.stem.c_out, |m| m.c_out)
    }

    pub fn stem_out(&self) -> (usize, usize) {
        (
            self.input.h.div_ceil(self.stem.stride),
            self.input.w.div_ceil(self.stem.stride),
        )
    }

    /// Per-module spatial shapes in execution order.
    pub fn module_shapes(&self) -> Vec<ModuleShape> {
        let (mut h, mut w) = self.stem_out();
        self.modules()
            .map(|(_, _, m)| {
                let s = ModuleShape {
                    h_in: h,
                    w_in: w,
                    h_out: h.div_ceil(m.stride),
                    w_out: w.div_ceil(m.stride),
                };
                (h, w) = (s.h_out, s.w_out);
                s
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.input.c == 0 || self.input.h == 0 || self.input.w == 0 || self.classes == 0 {
            return bad("input shape and class count must be positive".into());
        }
        if self.stem.c_out == 0 || !(1..=2).contains(&self.stem.stride) {
            return bad(format!("invalid stem {:?}", self.stem));
        }
        let mut c = self.stem.c_out;
        for ((s, m, cfg), shape) in self.modules().zip(self.module_shapes()) {
            cfg.validate()
                .map_err(|e| Error::InvalidConfig(format!("stage {} module {}: {e}", s + 1, m + 1)))?;
            if cfg.c_in != c {
                return bad(format!(
                    "stage {} module {} expects {} input channels, previous layer gives {c}",
                    s + 1,
                    m + 1,
                    cfg.c_in
                ));
            }
            if cfg.stride == 2 && (shape.h_in % 2 != 0 || shape.w_in % 2 != 0 || shape.h_in < 2 || shape.w_in < 2) {
                return bad(format!(
                    "stage {} module {} downsamples a {}x{} map; stride-2 modules need even sizes",
                    s + 1,
                    m + 1,
                    shape.h_in,
                    shape.w_in
                ));
            }
            c = cfg.c_out;
        }
        Ok(())
    }
}
