//! Bundled instances: a two-period toy network and a synthetic plant with
//! three gasholders, four conversion units and two demands, plus a seeded
//! supply-history generator for the synthetic plant.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::network::{
    Arc, ConversionParams, DemandClass, DemandParams, EnergyNetwork, HorizonData, PlantCase, StorageParams, Unit,
    UnitRole,
};

pub const DEFAULT_START_STOP_COST: f64 = 100.0;
pub const DEFAULT_DEVIATION_COST: f64 = 1.0;
pub const DEFAULT_ENERGY_PENALTY: f64 = 50.0;
pub const DEFAULT_EMISSION_PENALTY: f64 = 500.0;

fn unit(id: &str, role: UnitRole) -> Unit {
    Unit {
        id: id.to_string(),
        role,
    }
}

fn arc(id: &str, from: &str, to: &str, energy: &str, calorific: f64, cap: Option<(f64, f64)>) -> Arc {
    Arc {
        id: id.to_string(),
        from: from.to_string(),
        to: to.to_string(),
        energy: energy.to_string(),
        calorific,
        flow_min: cap.map(|c| c.0),
        flow_max: cap.map(|c| c.1),
    }
}

fn storage(level_min: f64, level_max: f64, max_change: f64, level_mid: f64) -> UnitRole {
    UnitRole::Storage(StorageParams {
        level_min,
        level_max,
        max_change,
        level_mid,
        initial_level: level_mid,
    })
}

fn conversion(efficiency: f64, min_input_calorific: f64, min_output_ratio: f64) -> UnitRole {
    UnitRole::Conversion(ConversionParams {
        efficiency,
        min_input_calorific,
        min_output_ratio,
        initially_on: true,
    })
}

fn produced(penalty: f64) -> UnitRole {
    UnitRole::Demand(DemandParams {
        class: DemandClass::ProducedEnergy,
        penalty,
    })
}

/// Steam demand of the toy network, repeated past two periods.
pub const TOY_DEMAND: [f64; 2] = [12.0, 28.0];
pub const TOY_SUPPLY: f64 = 10.0;

/// One gas source, one gasholder, one boiler, one steam demand.
///
/// Boiler input and output flows are equal (0.9 * 3.0 = 2.7). At the default
/// demand the second period needs 28 units but the gasholder can fall by at
/// most 15 below inflow, so the ramp limit binds there.
pub fn toy_case(periods: usize) -> PlantCase {
    let network = EnergyNetwork {
        energies: vec!["BFG".into(), "steam".into()],
        units: vec![
            unit("bfg_source", UnitRole::Supply),
            unit("holder", storage(20.0, 80.0, 15.0, 50.0)),
            unit("boiler", conversion(0.9, 2.5, 0.2)),
            unit("steam_user", produced(DEFAULT_ENERGY_PENALTY)),
        ],
        arcs: vec![
            arc("z_bfg", "bfg_source", "holder", "BFG", 3.0, None),
            arc("bfg_in", "holder", "boiler", "BFG", 3.0, Some((5.0, 30.0))),
            arc("steam_out", "boiler", "steam_user", "steam", 2.7, Some((0.0, 30.0))),
        ],
    };
    let demand = (0..periods).map(|t| TOY_DEMAND[t % 2]).collect();
    let horizon = HorizonData {
        periods,
        demands: BTreeMap::from([("steam_user".to_string(), demand)]),
        nominal_supply: BTreeMap::from([("z_bfg".to_string(), vec![TOY_SUPPLY; periods])]),
        start_stop_cost: DEFAULT_START_STOP_COST,
        deviation_cost: DEFAULT_DEVIATION_COST,
        big_m: None,
    };
    PlantCase { network, horizon }
}

pub const SYNTHETIC_PERIODS: usize = 8;

/// Gas sources of the synthetic plant: (supply arc, mean, seasonal amplitude, noise sd).
pub const SYNTHETIC_SOURCES: [(&str, f64, f64, f64); 3] = [
    ("z_bfg", 100.0, 12.0, 4.0),
    ("z_cog", 24.0, 3.0, 0.7),
    ("z_ldg", 20.0, 4.0, 0.6),
];

/// Period of the seasonal supply cycle.
pub const SYNTHETIC_SEASON: f64 = 24.0;

/// Synthetic plant: BFG, COG and LDG gasholders feeding two boilers, a
/// BFG/LDG power unit and an LDG generator, which serve steam and
/// electricity demands. Nominal supply is the seasonal mean profile.
pub fn synthetic_case() -> PlantCase {
    let network = EnergyNetwork {
        energies: ["BFG", "COG", "LDG", "steam", "electricity"].map(String::from).to_vec(),
        units: vec![
            unit("blast_furnace", UnitRole::Supply),
            unit("coke_oven", UnitRole::Supply),
            unit("converter", UnitRole::Supply),
            unit("holder_bfg", storage(60.0, 240.0, 30.0, 150.0)),
            unit("holder_cog", storage(20.0, 100.0, 12.0, 60.0)),
            unit("holder_ldg", storage(10.0, 80.0, 10.0, 45.0)),
            unit("boiler_bfg", conversion(0.88, 3.0, 0.3)),
            unit("boiler_cog", conversion(0.9, 15.0, 0.2)),
            unit("power_mix", conversion(0.38, 4.2, 0.25)),
            unit("generator_ldg", conversion(0.33, 7.0, 0.2)),
            unit("steam_header", produced(DEFAULT_ENERGY_PENALTY)),
            unit("grid", produced(DEFAULT_ENERGY_PENALTY)),
        ],
        arcs: vec![
            arc("z_bfg", "blast_furnace", "holder_bfg", "BFG", 3.2, None),
            arc("z_cog", "coke_oven", "holder_cog", "COG", 17.0, None),
            arc("z_ldg", "converter", "holder_ldg", "LDG", 7.5, None),
            arc(
                "bfg_boiler",
                "holder_bfg",
                "boiler_bfg",
                "BFG",
                3.2,
                Some((20.0, 110.0)),
            ),
            arc("cog_boiler", "holder_cog", "boiler_cog", "COG", 17.0, Some((6.0, 40.0))),
            arc("bfg_power", "holder_bfg", "power_mix", "BFG", 3.2, Some((0.0, 60.0))),
            arc("ldg_power", "holder_ldg", "power_mix", "LDG", 7.5, Some((0.0, 30.0))),
            arc(
                "ldg_generator",
                "holder_ldg",
                "generator_ldg",
                "LDG",
                7.5,
                Some((4.0, 20.0)),
            ),
            arc(
                "steam_bfg",
                "boiler_bfg",
                "steam_header",
                "steam",
                2.8,
                Some((0.0, 110.0)),
            ),
            arc(
                "steam_cog",
                "boiler_cog",
                "steam_header",
                "steam",
                2.8,
                Some((0.0, 220.0)),
            ),
            arc("power_out", "power_mix", "grid", "electricity", 3.6, Some((0.0, 40.0))),
            arc(
                "generator_out",
                "generator_ldg",
                "grid",
                "electricity",
                3.6,
                Some((0.0, 15.0)),
            ),
        ],
    };
    let periods = SYNTHETIC_PERIODS;
    let nominal_supply = SYNTHETIC_SOURCES
        .iter()
        .map(|&(id, mean, amp, _)| {
            let series = (0..periods).map(|t| seasonal(mean, amp, t as f64)).collect();
            (id.to_string(), series)
        })
        .collect();
    let steam = [200.0, 205.0, 230.0, 260.0, 265.0, 235.0, 200.0, 195.0];
    let power = [24.0, 26.0, 28.0, 29.0, 27.0, 24.0, 22.0, 21.0];
    let horizon = HorizonData {
        periods,
        demands: BTreeMap::from([
            ("steam_header".to_string(), steam.to_vec()),
            ("grid".to_string(), power.to_vec()),
        ]),
        nominal_supply,
        start_stop_cost: DEFAULT_START_STOP_COST,
        deviation_cost: DEFAULT_DEVIATION_COST,
        big_m: None,
    };
    PlantCase { network, horizon }
}

fn seasonal(mean: f64, amp: f64, tau: f64) -> f64 {
    mean + amp * (2.0 * PI * tau / SYNTHETIC_SEASON).sin()
}

/// AR(1) coefficient of the supply noise.
pub const SYNTHETIC_AR: f64 = 0.7;

/// Seasonal-plus-AR(1) supply histories for the synthetic plant's supply
/// arcs, `len` observations each. The last observation sits just before
/// the first period of [`synthetic_case`]'s phase.
pub fn synthetic_history(seed: u64, len: usize) -> BTreeMap<String, Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for &(id, mean, amp, sd) in &SYNTHETIC_SOURCES {
        let mut noise = 0.0;
        let innovation = sd * (1.0 - SYNTHETIC_AR * SYNTHETIC_AR).sqrt();
        let series = (0..len)
            .map(|i| {
                noise = SYNTHETIC_AR * noise
                    + innovation * {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        e
                    };
                let tau = i as f64 - len as f64;
                seasonal(mean, amp, tau) + noise
            })
            .collect();
        out.insert(id.to_string(), series);
    }
    out
}
