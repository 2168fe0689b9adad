use softalign::toytts::checkpoint::{parse_key_values, Settings};
use softalign::toytts::{LossMode, ToyTask, TrainConfig};
use softalign::{Error, Result};

use crate::TrainArgs;

const KEYS: [&str; 10] = [
    "steps",
    "batch",
    "seed",
    "loss",
    "learning_rate",
    "sigma2",
    "lambda_length",
    "ema_decay",
    "adversarial",
    "stochastic_durations",
];

/// Defaults, then the config file, then flags.
pub fn resolve(args: &TrainArgs) -> Result<(ToyTask, TrainConfig)> {
    let map = match &args.config {
        Some(path) => parse_key_values(&std::fs::read_to_string(path)?)?,
        None => Default::default(),
    };
    if let Some(k) = map.keys().find(|k| !KEYS.contains(&k.as_str())) {
        return Err(Error::Config(format!("unknown config key {k}")));
    }
    let s = Settings(&map);
    let pick = |key: &str| map.contains_key(key);

    let mut c = TrainConfig::default();
    let mut stochastic = false;
    if pick("steps") {
        c.steps = s.get("steps")?;
    }
    if pick("batch") {
        c.batch = s.get("batch")?;
    }
    if pick("seed") {
        c.seed = s.get("seed")?;
    }
    if pick("loss") {
        c.loss = s.get("loss")?;
    }
    if pick("learning_rate") {
        c.learning_rate = s.get("learning_rate")?;
    }
    if pick("sigma2") {
        c.sigma2 = s.get("sigma2")?;
    }
    if pick("lambda_length") {
        c.weights.lambda_length = s.get("lambda_length")?;
    }
    if pick("ema_decay") {
        c.ema_decay = Some(s.get("ema_decay")?);
    }
    if pick("adversarial") {
        c.adversarial = s.get("adversarial")?;
    }
    if pick("stochastic_durations") {
        stochastic = s.get("stochastic_durations")?;
    }

    c.steps = args.steps.unwrap_or(c.steps);
    c.batch = args.batch.unwrap_or(c.batch);
    c.seed = args.seed.unwrap_or(c.seed);
    if let Some(l) = &args.loss {
        c.loss = l.parse::<LossMode>()?;
    }
    c.learning_rate = args.learning_rate.unwrap_or(c.learning_rate);
    c.sigma2 = args.sigma2.unwrap_or(c.sigma2);
    c.weights.lambda_length = args.lambda_length.unwrap_or(c.weights.lambda_length);
    if args.ema_decay.is_some() {
        c.ema_decay = args.ema_decay;
    }
    c.adversarial |= args.adversarial;
    stochastic |= args.stochastic_durations;
    c.validate()?;

    let task = if stochastic { ToyTask::stochastic() } else { ToyTask::default() };
    Ok((task, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn args(config: Option<PathBuf>) -> TrainArgs {
        TrainArgs {
            config,
            out: PathBuf::from("unused"),
            ..Default::default()
        }
    }

    #[test]
    fn defaults_without_file_or_flags() {
        let (task, c) = resolve(&args(None)).unwrap();
        assert_eq!(c, TrainConfig::default());
        assert_eq!(task, ToyTask::default());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.cfg");
        std::fs::write(&path, "# run\nsteps = 50\nloss=l1\nseed=4\nstochastic_durations=true\n").unwrap();
        let mut a = args(Some(path));
        a.seed = Some(9);
        let (task, c) = resolve(&a).unwrap();
        assert_eq!(c.steps, 50);
        assert_eq!(c.loss, LossMode::L1);
        assert_eq!(c.seed, 9);
        assert_eq!(task, ToyTask::stochastic());
    }

    #[test]
    fn unknown_key_and_bad_value_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.cfg");
        std::fs::write(&path, "stepz=3\n").unwrap();
        assert!(matches!(resolve(&args(Some(path.clone()))), Err(Error::Config(_))));
        std::fs::write(&path, "steps=many\n").unwrap();
        assert!(matches!(resolve(&args(Some(path))), Err(Error::Config(_))));
    }
}
