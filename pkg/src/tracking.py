"""Optional MLflow tracking of CLI runs; failures are logged and never change results."""
import os

import mlflow

from config.logging_config import get_logger

logger = get_logger(__name__)


def log_run(tracking, run_name: str, params: dict, metrics: dict, artifacts=()) -> str | None:
    """Log one run when ``tracking.enabled``; returns the MLflow run id or None."""
    if not tracking.enabled:
        return None
    try:
        mlflow.set_tracking_uri(os.getenv('MLFLOW_TRACKING_URI', tracking.uri))
        mlflow.set_experiment(tracking.experiment)
        with mlflow.start_run(run_name=run_name) as run:
            mlflow.log_params({k: str(v) for k, v in params.items()})
            mlflow.log_metrics({k: float(v) for k, v in metrics.items()})
            for path in artifacts:
                mlflow.log_artifact(path)
            logger.info(f'Run {run_name} logged to MLflow ({run.info.run_id})')
            return run.info.run_id
    except Exception as e:
        logger.warning(f'MLflow tracking failed for {run_name}: {e}')
        return None
