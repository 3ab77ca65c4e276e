//! Desk-scale experiment on synthetic frames: pretraining and downstream
//! sets cut from one generated survey, pretraining runs per strategy, and
//! frozen-feature probes against a random-init encoder.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderState, InputNorm};
use crate::error::Result;
use crate::eval::{extract_features, linear_probe, LabeledSet, ProbeConfig, ProbeOutcome};
use crate::image::Image;
use crate::nn::Scalar;
use crate::tiling::synth::{synth_generate, SynthConfig};
use crate::tiling::{
    build_downstream_set, build_pretrain_set, subsample_labels, DatasetManifest, DownstreamRecipe, PretrainRecipe,
    SourceFrame, Split,
};
use crate::trainer::{MetricRow, Param, RunConfig, Seeds, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeskProtocol {
    pub frames: usize,
    pub frame_seed: u64,
    pub synth: SynthConfig,
    pub pretrain: PretrainRecipe,
    pub downstream: DownstreamRecipe,
    pub label_fraction: f64,
    pub probe: ProbeConfig,
}

impl Default for DeskProtocol {
    fn default() -> Self {
        DeskProtocol {
            frames: 200,
            frame_seed: 7,
            synth: SynthConfig::default(),
            pretrain: PretrainRecipe {
                patches_per_frame: 4,
                size: 40,
                overlap_on_animal_frames: false,
                overlap_fraction: 0.5,
            },
            downstream: DownstreamRecipe {
                fg_size: 32,
                bg_size: 64,
                ..DownstreamRecipe::default()
            },
            label_fraction: 0.1,
            probe: ProbeConfig::default(),
        }
    }
}

/// Everything cut from one synthetic survey.
pub struct DeskData {
    pub frames: Vec<SourceFrame>,
    pub pretrain_manifest: DatasetManifest,
    pub pretrain: Vec<Image>,
    pub downstream: DatasetManifest,
    pub train: LabeledSet,
    pub val: LabeledSet,
}

impl DeskProtocol {
    pub fn build_data(&self) -> Result<DeskData> {
        let frames = synth_generate(&self.synth, self.frames, self.frame_seed)?;
        let pretrain_manifest = build_pretrain_set(&frames, &self.pretrain, self.frame_seed)?;
        let by_id: std::collections::HashMap<&str, &SourceFrame> =
            frames.iter().map(|f| (f.frame_id.as_str(), f)).collect();
        let pretrain = pretrain_manifest
            .records
            .iter()
            .map(|r| r.crop(by_id[r.frame_id.as_str()]))
            .collect::<Result<Vec<_>>>()?;
        let downstream = build_downstream_set(&frames, &self.downstream, self.frame_seed)?.manifest;
        let train = LabeledSet::from_manifest(&downstream, &frames, Split::Train)?;
        let val = LabeledSet::from_manifest(&downstream, &frames, Split::Val)?;
        Ok(DeskData {
            frames,
            pretrain_manifest,
            pretrain,
            downstream,
            train,
            val,
        })
    }

    /// Indices into `data.train` kept at the protocol's label fraction.
    pub fn label_subset(&self, data: &DeskData, seed: u64) -> Result<Vec<usize>> {
        let sub = subsample_labels(&data.downstream, self.label_fraction, seed)?;
        let kept: HashSet<&str> = sub.records_in(Split::Train).map(|r| r.patch_id.as_str()).collect();
        Ok((0..data.train.len()).filter(|&i| kept.contains(data.train.ids[i].as_str())).collect())
    }

    /// Frozen-feature linear probe of an encoder's backbone.
    pub fn probe<T: Scalar>(
        &self,
        data: &DeskData,
        state: &EncoderState<T>,
        norm: &InputNorm,
        seed: u64,
    ) -> Result<ProbeOutcome> {
        let keep = self.label_subset(data, seed)?;
        let images: Vec<Image> = keep.iter().map(|&i| data.train.images[i].clone()).collect();
        let labels: Vec<usize> = keep.iter().map(|&i| data.train.labels[i]).collect();
        let xt = extract_features(&state.encoder, &state.query, norm, &images)?;
        let xv = extract_features(&state.encoder, &state.query, norm, &data.val.images)?;
        let probe = ProbeConfig {
            seed,
            ..self.probe.clone()
        };
        linear_probe((xt.view(), &labels), (xv.view(), &data.val.labels), self.label_fraction, &probe)
    }

    /// Pretrain with `config` (seeds derived from `seed`), then probe.
    pub fn pretrain_and_probe(&self, data: &DeskData, config: &RunConfig, seed: u64) -> Result<DeskRun> {
        let config = RunConfig {
            seeds: Seeds::from_base(seed),
            ..config.clone()
        };
        let mut trainer = Trainer::new(config, &data.pretrain, None)?;
        trainer.run()?;
        let rows = trainer.rows().to_vec();
        let learner = trainer.into_learner();
        let outcome = self.probe(data, &learner.state, &learner.norm, seed)?;
        Ok(DeskRun { outcome, rows })
    }

    /// Probe of the untrained encoder the same run would start from.
    pub fn baseline(&self, data: &DeskData, config: &RunConfig, seed: u64) -> Result<ProbeOutcome> {
        let seeds = Seeds::from_base(seed);
        let state = EncoderState::<Param>::new(config.encoder_spec(), seeds.init)?;
        let norm = InputNorm::estimate(data.pretrain.iter())?;
        self.probe(data, &state, &norm, seed)
    }
}

pub struct DeskRun {
    pub outcome: ProbeOutcome,
    pub rows: Vec<MetricRow>,
}
