//! Flag value parsers. Variable indices on the command line are 1-based.

use deeppce::ConditionSpec;

use crate::error::CliError;

fn index(token: &str) -> Result<usize, CliError> {
    let i: usize = token
        .trim()
        .parse()
        .map_err(|_| CliError::Argument(format!("'{token}' is not a variable index")))?;
    if i == 0 {
        return Err(CliError::Argument("variable indices are 1-based".into()));
    }
    Ok(i - 1)
}

/// `"1,3,5"` → `[0, 2, 4]`.
pub fn parse_set(s: &str) -> Result<Vec<usize>, CliError> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut set: Vec<usize> = s.split(',').map(index).collect::<Result<_, _>>()?;
    let n = set.len();
    set.sort_unstable();
    set.dedup();
    if set.len() != n {
        return Err(CliError::Argument(format!("repeated variable in set '{s}'")));
    }
    Ok(set)
}

/// `"1=0.5,3=-1"` → condition on X_1 = 0.5 and X_3 = −1.
pub fn parse_condition(s: &str) -> Result<ConditionSpec, CliError> {
    let pairs = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (i, v) = p
                .split_once('=')
                .ok_or_else(|| CliError::Argument(format!("condition '{p}' is not of the form i=v")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| CliError::Argument(format!("'{v}' is not a number")))?;
            Ok((index(i)?, v))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(ConditionSpec::new(pairs)?)
}

/// `"1e5,1e6"` → `[100000, 1000000]`; scientific notation is accepted.
pub fn parse_sizes(s: &str) -> Result<Vec<usize>, CliError> {
    s.split(',')
        .map(|t| {
            let v: f64 = t
                .trim()
                .parse()
                .map_err(|_| CliError::Argument(format!("'{t}' is not a sample size")))?;
            if !(v >= 1.0 && v.fract() == 0.0 && v < 1e15) {
                return Err(CliError::Argument(format!("'{t}' is not a positive integer")));
            }
            Ok(v as usize)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sets_are_one_based() {
        assert_eq!(parse_set("1,3, 5").unwrap(), vec![0, 2, 4]);
        assert_eq!(parse_set("").unwrap(), Vec::<usize>::new());
        assert!(parse_set("0").is_err());
        assert!(parse_set("2,2").is_err());
        assert!(parse_set("a").is_err());
    }

    #[test]
    fn conditions() {
        let c = parse_condition("1=0.5, 3=-1").unwrap();
        assert_eq!(c.fixed().get(&0), Some(&0.5));
        assert_eq!(c.fixed().get(&2), Some(&-1.0));
        assert!(parse_condition("1=0.5,1=2").is_err());
        assert!(parse_condition("1:0.5").is_err());
        assert!(parse_condition("1=x").is_err());
        assert!(parse_condition("1=nan").is_err());
    }

    #[test]
    fn sizes() {
        assert_eq!(parse_sizes("1e5,2000").unwrap(), vec![100_000, 2000]);
        assert!(parse_sizes("1.5").is_err());
        assert!(parse_sizes("0").is_err());
    }
}
