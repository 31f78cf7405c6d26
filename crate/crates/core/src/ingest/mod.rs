//! Dataset readers and the tag/role mapping tables.

mod labels;
mod reader;
mod schema;

pub use labels::{
    default_map_text, default_role_map_text, map_label, map_role, AttackClass, InsiderLabel, LabelMap, MapFile,
    Role, RoleMap, TagNormalization,
};
pub use reader::{
    load_dataset, load_dataset_with, read_dataset, write_reject_report, FlowRecord, LoadOptions, LoadedDataset,
    Reject,
};
pub use schema::{Column, ColumnKind, DatasetSchema, SchemaName, CIC_MIN_COLUMNS, KDD_FEATURES};

/// Label and role tables resolved from the shipped defaults plus an optional
/// operator mapping file.
pub fn resolve_maps(schema: SchemaName, map_file: Option<&str>) -> crate::Result<(LabelMap, RoleMap)> {
    let mut labels = LabelMap::default_for(schema);
    let mut roles = RoleMap::default();
    if let Some(text) = map_file {
        let parsed = MapFile::parse(text)?;
        labels.override_with(&parsed.labels)?;
        roles.override_with(&parsed.roles);
    }
    Ok((labels, roles))
}
