use std::fs;
use std::path::{Path, PathBuf};

use crate::audio_dsp::store::FeatureRecord;
use crate::audio_dsp::{extract_features, load_wav, AudioClip};
use crate::classes::CommandClass;
use crate::error::{Error, Result};
use crate::exec::Exec;

/// A labelled clip and its path relative to the corpus root.
#[derive(Debug, Clone)]
pub struct SpeechClip {
    pub clip_id: String,
    pub path: PathBuf,
    pub clip: AudioClip,
}

/// Reads `root/<word>/*.wav` for the four command words, in sorted file
/// order, keeping at most `per_class` clips per word. Unreadable files are
/// skipped with a warning.
pub fn load_speech_corpus(root: &Path, per_class: Option<usize>, exec: Exec) -> Result<Vec<SpeechClip>> {
    let mut out = Vec::new();
    for class in CommandClass::ALL {
        let dir = root.join(class.name());
        if !dir.is_dir() {
            return Err(Error::Dataset(format!(
                "speech corpus has no `{}` folder under {}",
                class.name(),
                root.display()
            )));
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
            .collect();
        files.sort();
        let mut kept = 0;
        let limit = per_class.unwrap_or(usize::MAX);
        let mut start = 0;
        while kept < limit && start < files.len() {
            let end = (start + (limit - kept).min(256)).min(files.len());
            let loaded = exec.map(&files[start..end], |p| load_wav(p, Some(class)));
            for (p, clip) in files[start..end].iter().zip(loaded) {
                match clip {
                    Ok(clip) => {
                        let name = p.file_name().and_then(|f| f.to_str()).unwrap_or_default();
                        out.push(SpeechClip {
                            clip_id: format!("{}/{name}", class.name()),
                            path: p.clone(),
                            clip,
                        });
                        kept += 1;
                    }
                    Err(e) => log::warn!("skipping unreadable clip: {e}"),
                }
            }
            start = end;
        }
        if kept == 0 {
            return Err(Error::Dataset(format!("no readable `{}` clips in {}", class.name(), dir.display())));
        }
    }
    Ok(out)
}

/// MFCC feature records for labelled clips, in input order.
pub fn feature_records(clips: &[SpeechClip], exec: Exec) -> Result<Vec<FeatureRecord>> {
    let audio: Vec<AudioClip> = clips.iter().map(|c| c.clip.clone()).collect();
    let feats = extract_features(&audio, exec)?;
    clips
        .iter()
        .zip(feats)
        .map(|(c, features)| {
            let class = c
                .clip
                .label
                .ok_or_else(|| Error::Dataset(format!("clip `{}` has no label", c.clip_id)))?;
            Ok(FeatureRecord {
                clip_id: c.clip_id.clone(),
                class,
                source: c.path.display().to_string(),
                features,
            })
        })
        .collect()
}
