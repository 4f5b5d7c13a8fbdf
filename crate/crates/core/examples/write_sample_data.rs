//! Writes the bundled sample inputs into a directory (default `data`).

use std::path::PathBuf;

use ebdesign::prior::{prior_document, Prior};
use ebdesign::sample_data::{drug_config, drug_os_archive, pfs_archive, star_config, star_prior};
use ebdesign::study_data::save_archive;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data".into()));
    std::fs::create_dir_all(&dir)?;
    save_archive(&drug_os_archive()?, dir.join("drug_os.csv"))?;
    save_archive(&pfs_archive()?, dir.join("drug_pfs.csv"))?;
    std::fs::write(dir.join("drug.toml"), drug_config().to_toml())?;
    std::fs::write(dir.join("star.toml"), star_config().to_toml())?;
    let star = serde_json::to_string_pretty(&prior_document(&Prior::Gaussian(star_prior()), None))?;
    std::fs::write(dir.join("star_prior.json"), star + "\n")?;
    println!("wrote sample data to {}", dir.display());
    Ok(())
}
