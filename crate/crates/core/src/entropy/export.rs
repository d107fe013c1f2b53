use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::jpeg::{Channel, CompressionKernels, QTable, BLOCK, BLOCK_AREA};

/// `Q = clamp(round(1/q), 1, 255)`, with `q < 1/255` (including 0) mapped to 255.
pub fn export_qtables(kernels: &CompressionKernels) -> [QTable; 3] {
    Channel::ALL.map(|c| {
        let q = kernels.channel(c);
        let mut t = [0u16; BLOCK_AREA];
        for (dst, &v) in t.iter_mut().zip(q.iter()) {
            *dst = if v < 1.0 / 255.0 { 255 } else { (1.0 / v).round().clamp(1.0, 255.0) as u16 };
        }
        QTable(t)
    })
}

/// Training hyper-parameters recorded alongside exported tables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExportMetadata {
    pub lambda: f64,
    pub lambda1: f64,
    pub c: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelRows {
    pub y: Vec<Vec<f64>>,
    pub cb: Vec<Vec<f64>>,
    pub cr: Vec<Vec<f64>>,
}

/// Deployable tables plus the float kernels they came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QTableExport {
    pub y_qtable: QTable,
    pub cb_qtable: QTable,
    pub cr_qtable: QTable,
    pub kernels: KernelRows,
    pub metadata: ExportMetadata,
}

impl QTableExport {
    pub fn new(kernels: &CompressionKernels, metadata: ExportMetadata) -> Self {
        let [y, cb, cr] = export_qtables(kernels);
        let rows = |c: Channel| kernels.channel(c).chunks(BLOCK).map(|r| r.to_vec()).collect();
        Self {
            y_qtable: y,
            cb_qtable: cb,
            cr_qtable: cr,
            kernels: KernelRows { y: rows(Channel::Y), cb: rows(Channel::Cb), cr: rows(Channel::Cr) },
            metadata,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Kernels a standard encoder would use: reciprocals of the integer tables.
    pub fn deployed_kernels(&self) -> CompressionKernels {
        CompressionKernels::from_qtables(&[self.y_qtable, self.cb_qtable, self.cr_qtable])
    }
}
