//! The built-in example systems, embedded at compile time.

pub struct CatalogEntry {
    pub name: &'static str,
    pub source: &'static str,
}

macro_rules! entry {
    ($name:literal) => {
        CatalogEntry { name: $name, source: include_str!(concat!("../catalog/", $name, ".toy")) }
    };
}

pub const CATALOG: &[CatalogEntry] = &[
    entry!("free_particle"),
    entry!("ex1_symmetric"),
    entry!("ex1_mexican_hat"),
    entry!("ex1_asymmetric"),
    entry!("ex1_asymmetric_confined"),
    entry!("ex2_conformal_pair"),
    entry!("ex3_conformal_relativistic"),
];

/// Look up a catalog entry by name, file name or path ending in one.
pub fn find(arg: &str) -> Option<&'static CatalogEntry> {
    let base = arg.rsplit(['/', '\\']).next().unwrap_or(arg);
    let stem = base.strip_suffix(".toy").unwrap_or(base);
    CATALOG.iter().find(|e| e.name == stem)
}
