use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dense::{param_count, DenseNet};
use super::operator::{NetKind, OperatorNet};
use crate::archive::{self, FORMAT_VERSION};
use crate::closure::Normalization;
use crate::error::{Result, RomError};

const WEIGHT_MAGIC: &[u8; 4] = b"ROMW";

#[derive(Serialize, Deserialize)]
struct WeightManifest {
    format: String,
    kind: NetKind,
    seed: u64,
    activation: String,
    subnets: Vec<Vec<usize>>,
    reduction: Vec<usize>,
    /// Per layer: weight matrix row-major (out x in), then bias.
    layer_files: Vec<String>,
    normalization: Option<Normalization>,
}

fn layer_files(prefix: &str, widths: &[usize]) -> Vec<String> {
    (0..widths.len() - 1).map(|l| format!("{prefix}_layer{l}.bin")).collect()
}

fn write_net(dir: &Path, prefix: &str, net: &DenseNet, files: &mut Vec<String>) -> Result<()> {
    let mut o = 0;
    for (w, name) in net.widths.windows(2).zip(layer_files(prefix, &net.widths)) {
        let n = w[0] * w[1] + w[1];
        archive::write_blob(&dir.join(&name), WEIGHT_MAGIC, &net.params[o..o + n])?;
        o += n;
        files.push(name);
    }
    Ok(())
}

fn read_net(dir: &Path, prefix: &str, widths: &[usize]) -> Result<DenseNet> {
    let mut net = DenseNet::zeros(widths).map_err(|e| RomError::format(dir, e.to_string()))?;
    let mut o = 0;
    for (w, name) in widths.windows(2).zip(layer_files(prefix, widths)) {
        let n = w[0] * w[1] + w[1];
        let p = dir.join(&name);
        let v = archive::read_blob(&p, WEIGHT_MAGIC)?;
        if v.len() != n {
            return Err(RomError::format(
                p,
                format!("expected {n} values for a {}x{} layer, got {}", w[1], w[0], v.len()),
            ));
        }
        net.params[o..o + n].copy_from_slice(&v);
        o += n;
    }
    debug_assert_eq!(o, param_count(widths));
    Ok(net)
}

pub fn save_weights(net: &OperatorNet, dir: &Path, norm: Option<&Normalization>) -> Result<()> {
    archive::ensure_dir(dir)?;
    let mut files = Vec::new();
    for (s, sub) in net.subnets.iter().enumerate() {
        write_net(dir, &format!("sub{s}"), sub, &mut files)?;
    }
    write_net(dir, "reduction", &net.reduction, &mut files)?;
    archive::write_json(
        &dir.join("manifest.json"),
        &WeightManifest {
            format: FORMAT_VERSION.into(),
            kind: net.kind,
            seed: net.seed,
            activation: "softplus".into(),
            subnets: net.subnets.iter().map(|s| s.widths.clone()).collect(),
            reduction: net.reduction.widths.clone(),
            layer_files: files,
            normalization: norm.cloned(),
        },
    )
}

pub fn load_weights(dir: &Path) -> Result<(OperatorNet, Option<Normalization>)> {
    let mpath = dir.join("manifest.json");
    let m: WeightManifest = archive::read_json(&mpath)?;
    archive::check_version(&mpath, &m.format)?;
    let cat: usize = m.subnets.iter().map(|w| *w.last().unwrap_or(&0)).sum();
    if m.reduction.first() != Some(&cat) {
        return Err(RomError::format(mpath, "reduction input width differs from the concatenated sub-net outputs"));
    }
    let subnets =
        m.subnets.iter().enumerate().map(|(s, w)| read_net(dir, &format!("sub{s}"), w)).collect::<Result<Vec<_>>>()?;
    let reduction = read_net(dir, "reduction", &m.reduction)?;
    Ok((OperatorNet { kind: m.kind, subnets, reduction, seed: m.seed }, m.normalization))
}
