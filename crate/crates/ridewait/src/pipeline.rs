//! Fitted featurization pipeline: demand-supply index, collaborative
//! filtering models, and region clusters, all fit on the train split only,
//! then applied to any trip list.

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::Result;
use crate::features::{
    base_columns, featurize_base, build_ds_index, DemandSupplyIndex, FeatureMatrix,
    FeatureSchema, Task,
};
use crate::interactions::{
    featurize_interactions, interaction_columns, InteractionModels,
};
use crate::trip::{LabeledTrip, RegionGrid, SlotConfig};

pub struct FittedPipeline {
    pub grid: RegionGrid,
    pub slots: SlotConfig,
    pub ds_index: DemandSupplyIndex,
    pub models: InteractionModels,
}

impl FittedPipeline {
    pub fn fit(train: &[LabeledTrip], cfg: &RunConfig) -> Result<FittedPipeline> {
        let ds_index = build_ds_index(train, cfg.demand_supply.granularity_minutes, &cfg.slots)?;
        let models = InteractionModels::fit(
            train,
            &cfg.grid,
            &cfg.slots,
            &cfg.interactions.mf,
            &cfg.interactions.kmeans,
        )?;
        Ok(FittedPipeline {
            grid: cfg.grid.clone(),
            slots: cfg.slots.clone(),
            ds_index,
            models,
        })
    }

    /// Schema for a task, with or without the interaction extension.
    pub fn schema(&self, task: Task, with_interactions: bool) -> FeatureSchema {
        let mut cols = base_columns(task);
        if with_interactions {
            cols.extend(interaction_columns(task));
        }
        FeatureSchema::new(task, cols).expect("pipeline columns are valid")
    }

    /// Featurizes trips with the frozen models. Row order equals trip
    /// order; featurization is pure, so rows build in parallel.
    pub fn featurize(
        &self,
        trips: &[LabeledTrip],
        task: Task,
        with_interactions: bool,
    ) -> Result<FeatureMatrix> {
        let schema = self.schema(task, with_interactions);
        let rows: Result<Vec<Vec<f64>>> = trips
            .par_iter()
            .map(|trip| {
                let mut row = featurize_base(trip, task, &self.ds_index, &self.slots);
                if with_interactions {
                    row.extend(featurize_interactions(
                        trip,
                        task,
                        &self.models,
                        &self.grid,
                        &self.slots,
                    )?);
                }
                Ok(row)
            })
            .collect();
        let rows = rows?;
        let ids: Vec<String> = trips.iter().map(|t| t.record.order_id.clone()).collect();
        let labels: Vec<f64> = trips.iter().map(|t| t.wt_act_s as f64).collect();
        FeatureMatrix::new(schema, ids, rows.into_iter().flatten().collect(), labels)
    }
}
