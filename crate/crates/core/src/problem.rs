//! Problem instances (plant + objective) and their on-disk form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{ObjectiveData, QuadraticObjective};
use crate::plant::{generate_random_plant, Dims, PlantData, PlantModel};

/// How an instance was generated, kept for provenance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationInfo {
    pub plant_seed: u64,
    pub objective_seed: u64,
    pub a_norm: f64,
    pub f_norm: f64,
}

#[derive(Debug, Clone)]
pub struct Problem {
    pub plant: PlantModel,
    pub objective: QuadraticObjective,
    pub generation: Option<GenerationInfo>,
}

impl Problem {
    pub fn generate(plant_seed: u64, objective_seed: u64, dims: Dims, a_norm: f64, f_norm: f64) -> Result<Self> {
        let plant = generate_random_plant(plant_seed, dims, a_norm, f_norm)?;
        let objective = QuadraticObjective::random(objective_seed, dims.p)?;
        Ok(Self {
            plant,
            objective,
            generation: Some(GenerationInfo {
                plant_seed,
                objective_seed,
                a_norm,
                f_norm,
            }),
        })
    }

    pub fn to_file(&self) -> ProblemFile {
        ProblemFile {
            generation: self.generation,
            plant: self.plant.to_data(),
            objective: self.objective.to_data(),
        }
    }

    pub fn from_file(file: &ProblemFile) -> Result<Self> {
        let plant = PlantModel::from_data(&file.plant)?;
        let objective = QuadraticObjective::from_data(&file.objective)?;
        if objective.input_dim() != plant.dims().p {
            return Err(Error::Config(format!(
                "objective has {} inputs but plant has {}",
                objective.input_dim(),
                plant.dims().p
            )));
        }
        Ok(Self {
            plant,
            objective,
            generation: file.generation,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_toml(path, &self.to_file())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(&read_toml(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemFile {
    pub generation: Option<GenerationInfo>,
    pub plant: PlantData,
    pub objective: ObjectiveData,
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
