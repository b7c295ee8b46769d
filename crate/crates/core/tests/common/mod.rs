use std::path::PathBuf;

/// MNIST directory from `ASP_DATA_ROOT` or the workspace `data/` folder, if
/// the raw idx files are present.
pub fn mnist_dir() -> Option<PathBuf> {
    let root = std::env::var_os("ASP_DATA_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"));
    let dir = root.join("mnist");
    let dir = if dir.is_dir() { dir } else { root };
    let present = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte"]
        .iter()
        .all(|f| dir.join(f).exists() || dir.join(format!("{f}.gz")).exists());
    if present {
        Some(dir)
    } else {
        eprintln!("MNIST not found under {}; skipping", dir.display());
        None
    }
}
