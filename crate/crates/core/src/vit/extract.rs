use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};
use crate::vit::config::{ModelConfig, SubnetworkView};
use crate::vit::params::{Classifier, Params, UniversalWeights};

/// Copies the subnetwork with the first `k` heads out as a standalone model.
///
/// With separate classifiers, the head belonging to `k` becomes the extracted
/// model's (full-width) shared head.
pub fn extract_subnetwork<T: Float>(
    weights: &UniversalWeights<T>,
    cfg: &ModelConfig,
    k: usize,
) -> Result<(ModelConfig, UniversalWeights<T>)> {
    cfg.validate()?;
    let sub_cfg = cfg.extracted(k)?;
    if cfg.separate_classifiers && !cfg.supported_heads().contains(&k) {
        return Err(Error::Range(format!("no classifier was trained for k = {k}")));
    }
    let view = SubnetworkView::any(cfg, k);
    let sliced: Params<Option<Tensor<T>>> = weights.try_map(|info, t| {
        info.active_spec(t.shape(), &view).map(|spec| t.prefix_block(&spec.view, &spec.block, &spec.out)).transpose()
    })?;
    let head = match sliced.head {
        Classifier::Shared(l) => Classifier::Shared(l),
        Classifier::Separate(mut heads) => Classifier::Shared(heads.remove(&k).expect("classifier for k")),
    };
    let standalone =
        Params { head, ..sliced }.map(|info, t| t.clone().unwrap_or_else(|| panic!("{} not sliced", info.name)));
    standalone.check_layout(&sub_cfg)?;
    Ok((sub_cfg, standalone))
}

/// Overwrites the prefix blocks of `universal` with a trained standalone model
/// of `k_donor` heads; all other entries keep their current values.
pub fn warm_start_from_subnetwork<T: Float>(
    mut universal: UniversalWeights<T>,
    cfg: &ModelConfig,
    donor: &UniversalWeights<T>,
    donor_cfg: &ModelConfig,
    k_donor: usize,
) -> Result<UniversalWeights<T>> {
    let expected = cfg.extracted(k_donor)?;
    if *donor_cfg != expected {
        return Err(Error::config(format!(
            "donor configuration does not match the {k_donor}-head extraction: {donor_cfg:?} vs {expected:?}"
        )));
    }
    donor.check_layout(donor_cfg)?;
    let view = SubnetworkView::any(cfg, k_donor);
    let mut donor_entries = donor.entries().into_iter();
    let mut result = Ok(());
    for (info, t) in universal.entries_mut() {
        let Some(spec) = info.active_spec(t.shape(), &view) else { continue };
        let (_, src) = donor_entries.next().expect("layouts checked");
        if let Err(e) = t.write_prefix_block(&spec.view, &spec.block, src.data()) {
            result = Err(e);
            break;
        }
    }
    result?;
    Ok(universal)
}
