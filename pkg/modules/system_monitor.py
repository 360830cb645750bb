#!/usr/bin/env python3
"""
Host monitor - static machine info and resource snapshots for run logs,
diagnostic dumps and the ``status`` command.
"""

import os
import platform
from datetime import datetime, timedelta

import psutil

from utils.logger import setup_logger


class SystemMonitor:
    def __init__(self):
        self.logger = setup_logger()
        self.process = psutil.Process(os.getpid())

        # Thresholds for the status summary (percent)
        self.thresholds = {
            'memory_warning': 80,
            'memory_critical': 95,
            'disk_warning': 85,
            'disk_critical': 95,
        }

    def get_static_system_info(self):
        """Machine description recorded alongside every run"""
        try:
            return {
                'hostname': platform.node(),
                'system': platform.system(),
                'release': platform.release(),
                'machine': platform.machine(),
                'python_version': platform.python_version(),
                'cpu_count_physical': psutil.cpu_count(logical=False),
                'cpu_count_logical': psutil.cpu_count(logical=True),
                'total_memory_gb': round(psutil.virtual_memory().total / (1024**3), 1),
            }
        except Exception as e:
            self.logger.error(f"Static system info error: {e}")
            return {}

    def get_resource_snapshot(self):
        """Current resource usage of the host and of this process (JSON-safe)"""
        try:
            memory = psutil.virtual_memory()
            rss = self.process.memory_info().rss
            return {
                'time': datetime.now().isoformat(timespec='seconds'),
                'cpu_percent': psutil.cpu_percent(interval=None),
                'memory_percent': memory.percent,
                'memory_available_gb': round(memory.available / (1024**3), 2),
                'process_rss_mb': round(rss / (1024**2), 1),
                'process_threads': self.process.num_threads(),
            }
        except Exception as e:
            self.logger.error(f"Resource snapshot error: {e}")
            return {}

    def get_disk_usage(self, path="."):
        try:
            usage = psutil.disk_usage(str(path))
            return {
                'total_gb': round(usage.total / (1024**3), 1),
                'free_gb': round(usage.free / (1024**3), 1),
                'percent': usage.percent,
            }
        except Exception as e:
            self.logger.error(f"Disk usage error for {path}: {e}")
            return {}

    def get_uptime(self):
        """Formatted host uptime"""
        try:
            uptime_seconds = datetime.now().timestamp() - psutil.boot_time()
            uptime_delta = timedelta(seconds=uptime_seconds)

            days = uptime_delta.days
            hours, remainder = divmod(uptime_delta.seconds, 3600)
            minutes, _ = divmod(remainder, 60)

            if days > 0:
                return f"{days}d {hours}h {minutes}m"
            elif hours > 0:
                return f"{hours}h {minutes}m"
            else:
                return f"{minutes}m"
        except Exception:
            return "Unknown"

    def _get_status_indicator(self, metric_type, value):
        if value >= self.thresholds[f'{metric_type}_critical']:
            return "CRITICAL"
        if value >= self.thresholds[f'{metric_type}_warning']:
            return "WARNING"
        return "OK"

    def get_quick_status(self, path="."):
        """One-line summary for the status command"""
        snapshot = self.get_resource_snapshot()
        disk = self.get_disk_usage(path)
        if not snapshot:
            return "System status unavailable"
        status = (f"RAM: {snapshot['memory_percent']:.1f}% "
                  f"({self._get_status_indicator('memory', snapshot['memory_percent'])}) | "
                  f"Available: {snapshot['memory_available_gb']:.1f}GB")
        if disk:
            status += f" | Disk: {disk['percent']:.1f}% ({self._get_status_indicator('disk', disk['percent'])})"
        return status + f" | Uptime: {self.get_uptime()}"
