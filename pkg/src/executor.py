"""
Image Job Executor Module
Runs a per-image job over many images on a thread pool with standardized
success / error results, returned in image-id order whatever the
completion order.
"""

import traceback
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple

from src.config import worker_count


class ImageJobExecutor:
    """
    Executes a job on every (image_id, item) pair.
    Provides worker-pool setup, per-image error capture, and standardized
    result formatting.
    """

    def __init__(self, job: Callable[[str, Any], Any], max_workers: Optional[int] = None):
        """
        Initialize the executor with the job to run.

        Args:
            job: Called as job(image_id, item); must not mutate shared state
            max_workers: Worker cap; None reads AFFKIT_THREADS
        """
        self.job = job
        self.max_workers = max_workers or worker_count()

    def _run_one(self, image_id: str, item: Any) -> Dict[str, Any]:
        try:
            return self._format_success_result(image_id, self.job(image_id, item))
        except Exception as e:
            return self._format_error_result(image_id, e)

    def run(self, items: Iterable[Tuple[str, Any]]) -> List[Dict[str, Any]]:
        """
        Run the job on every item.

        Returns:
            One result dictionary per item, sorted by image id
        """
        items = sorted(items, key=lambda pair: pair[0])
        if self.max_workers <= 1 or len(items) <= 1:
            results = [self._run_one(image_id, item) for image_id, item in items]
        else:
            with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
                results = list(pool.map(lambda pair: self._run_one(*pair), items))
        return results

    def run_or_raise(self, items: Iterable[Tuple[str, Any]]) -> Dict[str, Any]:
        """
        Like run, but re-raises the first failure (in image-id order).

        Returns:
            image_id -> job result
        """
        results = self.run(items)
        for result in results:
            if not result["success"]:
                raise result["metadata"]["exception"]
        return {result["image_id"]: result["data"] for result in results}

    def _format_success_result(self, image_id: str, data: Any) -> Dict[str, Any]:
        return {
            "image_id": image_id,
            "success": True,
            "data": data,
            "metadata": {"execution_status": "completed"},
        }

    def _format_error_result(self, image_id: str, error: Exception) -> Dict[str, Any]:
        """
        Format an error result with detailed information.

        Args:
            image_id: Image whose job failed
            error: The exception that occurred
        """
        return {
            "image_id": image_id,
            "success": False,
            "data": None,
            "summary": f"Error processing image {image_id}: {error}",
            "metadata": {
                "error": str(error),
                "error_type": type(error).__name__,
                "exception": error,
                "traceback": traceback.format_exc(),
                "execution_status": "failed",
            },
        }
