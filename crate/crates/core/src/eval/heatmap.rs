use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::bagstore::SlideBag;
use crate::error::{Error, Result};
use crate::trainer::Network;
use crate::transforms::TokenView;

/// Encoder layer whose CLS attention is exported. Written `"last"` or an
/// index such as `"0"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LayerSelect {
    Last,
    Index(usize),
}

/// Attention head to export, or the mean over heads. Written `"mean"` or an
/// index such as `"2"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum HeadSelect {
    Mean,
    Index(usize),
}

impl FromStr for LayerSelect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Self::Last),
            _ => s
                .parse()
                .map(Self::Index)
                .map_err(|_| Error::config("eval.heatmap_layer", format!("expected `last` or an index, got `{s}`"))),
        }
    }
}

impl FromStr for HeadSelect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            _ => s
                .parse()
                .map(Self::Index)
                .map_err(|_| Error::config("eval.heatmap_head", format!("expected `mean` or an index, got `{s}`"))),
        }
    }
}

impl fmt::Display for LayerSelect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Last => f.write_str("last"),
            Self::Index(i) => write!(f, "{i}"),
        }
    }
}

impl fmt::Display for HeadSelect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Mean => f.write_str("mean"),
            Self::Index(i) => write!(f, "{i}"),
        }
    }
}

macro_rules! string_conversions {
    ($t:ty) => {
        impl TryFrom<String> for $t {
            type Error = Error;

            fn try_from(s: String) -> Result<Self> {
                s.parse()
            }
        }

        impl From<$t> for String {
            fn from(v: $t) -> String {
                v.to_string()
            }
        }
    };
}

string_conversions!(LayerSelect);
string_conversions!(HeadSelect);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatCell {
    pub row: i32,
    pub col: i32,
    pub weight: f64,
}

/// CLS attention over the tokens of one bag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub slide_id: String,
    pub layer: usize,
    pub head: HeadSelect,
    /// Weight the CLS query places on itself; token weights sum to one minus this.
    pub cls_weight: f64,
    /// One entry per token, in bag row order.
    pub cells: Vec<HeatCell>,
}

/// Encodes the full bag and reads the CLS attention row of the chosen layer.
pub fn attention_heatmap(bag: &SlideBag, net: &Network, layer: LayerSelect, head: HeadSelect) -> Result<Heatmap> {
    let trace = net.encode_view(&TokenView::full(bag), bag)?;
    let record = &trace.attention;
    let n_layers = record.num_layers();
    let layer = match layer {
        LayerSelect::Last => n_layers - 1,
        LayerSelect::Index(i) if i < n_layers => i,
        LayerSelect::Index(i) => {
            return Err(Error::Eval(format!("layer {i} out of range (encoder has {n_layers})")));
        }
    };
    let row: Array1<f64> = match head {
        HeadSelect::Mean => record.head_mean(layer),
        HeadSelect::Index(h) => record.rows[layer]
            .get(h)
            .cloned()
            .ok_or_else(|| Error::Eval(format!("head {h} out of range")))?,
    };
    let cells = bag
        .coords
        .iter()
        .enumerate()
        .map(|(i, c)| HeatCell {
            row: c[0],
            col: c[1],
            weight: row[i + 1],
        })
        .collect();
    Ok(Heatmap {
        slide_id: bag.slide_id.clone(),
        layer,
        head,
        cls_weight: row[0],
        cells,
    })
}

impl Heatmap {
    /// Token weight at each stored cell, in bag row order.
    pub fn weights(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.weight).collect()
    }

    /// Dense gray+alpha raster over the coordinate bounding box: width =
    /// column extent + 1, height = row extent + 1. Weights are min-max
    /// scaled to 0..=255; cells without a token are fully transparent.
    pub fn raster(&self) -> (u32, u32, Vec<u8>) {
        let rmin = self.cells.iter().map(|c| c.row).min().unwrap_or(0);
        let rmax = self.cells.iter().map(|c| c.row).max().unwrap_or(0);
        let cmin = self.cells.iter().map(|c| c.col).min().unwrap_or(0);
        let cmax = self.cells.iter().map(|c| c.col).max().unwrap_or(0);
        let h = (rmax - rmin + 1) as u32;
        let w = (cmax - cmin + 1) as u32;
        let lo = self.cells.iter().map(|c| c.weight).fold(f64::INFINITY, f64::min);
        let hi = self.cells.iter().map(|c| c.weight).fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let mut px = vec![0u8; (w * h * 2) as usize];
        for c in &self.cells {
            let v = if span > 0.0 { (c.weight - lo) / span } else { 0.0 };
            let at = (((c.row - rmin) as u32 * w + (c.col - cmin) as u32) * 2) as usize;
            px[at] = (v * 255.0).round() as u8;
            px[at + 1] = 255;
        }
        (w, h, px)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (w, h, px) = self.raster();
        image::save_buffer(path, &px, w, h, image::ExtendedColorType::La8)
            .map_err(|e| Error::Eval(format!("writing {}: {e}", path.display())))
    }
}
