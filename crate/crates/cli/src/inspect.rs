//! Offline readers for the on-disk formats.

use std::path::Path;

use serde_json::{json, Value};
use trinity_core::inference::Heatmap;
use trinity_core::kernel::Checkpoint;
use trinity_core::store::SparseTileRecord;
use trinity_core::Result;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => trinity_core::Error::not_found(path.display().to_string()),
        _ => e.into(),
    })
}

/// Header fields and per-channel non-zero counts of a `.trc` tile.
pub fn trc(path: &Path) -> Result<Value> {
    let bytes = read(path)?;
    let rec = SparseTileRecord::decode(&bytes)?;
    Ok(json!({
        "format": "trc",
        "version": u16::from_le_bytes([bytes[4], bytes[5]]),
        "zoom": bytes[6],
        "tile": {"x": rec.tile.x, "y": rec.tile.y},
        "channel_count": rec.channels.len(),
        "nnz": rec.channels.iter().map(Vec::len).collect::<Vec<_>>(),
        "bytes": bytes.len(),
    }))
}

/// Tile, task shapes and mean confidence per class of a `.trhm` heatmap.
pub fn trhm(path: &Path) -> Result<Value> {
    let bytes = read(path)?;
    let hm = Heatmap::decode(&bytes)?;
    let tasks: Vec<Value> = hm
        .class_counts
        .iter()
        .enumerate()
        .map(|(t, &classes)| {
            let means: Vec<f64> = (0..classes)
                .map(|c| {
                    let plane = hm.confidence(t, c);
                    plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64
                })
                .collect();
            json!({"classes": classes, "mean_confidence": means})
        })
        .collect();
    Ok(json!({
        "format": "trhm",
        "tile": {"x": hm.tile.x, "y": hm.tile.y},
        "tasks": tasks,
        "bytes": bytes.len(),
    }))
}

/// Model spec, epoch, parameter count and stored metrics of a `.trnk` checkpoint.
pub fn trnk(path: &Path) -> Result<Value> {
    let ck = Checkpoint::load(path)?;
    let tensors: Vec<Value> = ck.params.tensors.iter().map(|t| json!({"name": t.info.name, "dims": t.info.dims})).collect();
    Ok(json!({
        "format": "trnk",
        "architecture_id": ck.spec.architecture_id,
        "in_channels": ck.spec.in_channels,
        "tasks": ck.spec.tasks,
        "epoch": ck.epoch,
        "parameters": ck.params.tensors.iter().map(|t| t.data.len()).sum::<usize>(),
        "tensors": tensors,
        "has_optimizer": ck.optimizer.is_some(),
        "metrics": ck.metrics,
    }))
}
