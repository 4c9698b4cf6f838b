"""
Report Templates Module
HTML template for pretraining run reports
"""

from typing import Any, Dict


class ReportTemplates:
    """HTML templates for run reports"""

    @staticmethod
    def get_run_template() -> str:
        """Get jinja2 HTML template for a pretraining run"""
        return """
<!DOCTYPE html>
<html lang="en">
<head>
    <meta charset="UTF-8">
    <title>Pretraining Run Report - {{ run_name }}</title>
    <style>
        body { font-family: Arial, sans-serif; margin: 20px; color: #333; }
        .header { background-color: #2c3e50; color: white; padding: 20px; text-align: center; }
        .section { margin: 20px 0; }
        .metric { background-color: #f8f9fa; padding: 10px 15px; margin: 8px 0; border-radius: 5px; }
        .metric-title { font-weight: bold; color: #2c3e50; }
        table { width: 100%; border-collapse: collapse; margin: 10px 0; }
        th, td { border: 1px solid #ddd; padding: 6px; text-align: left; }
        th { background-color: #f2f2f2; }
        img { max-width: 100%; }
    </style>
</head>
<body>
    <div class="header">
        <h1>Pretraining Run Report</h1>
        <p>{{ run_name }} &middot; generated on {{ generation_time }}</p>
    </div>

    <div class="section">
        <h2>Run Overview</h2>
        {% for key, value in overview.items() %}
        <div class="metric"><span class="metric-title">{{ key }}:</span> {{ value }}</div>
        {% endfor %}
    </div>

    <div class="section">
        <h2>Training Curves</h2>
        {% for figure in figures %}
        <img src="{{ figure }}" alt="{{ figure }}">
        {% endfor %}
    </div>

    {% if metrics %}
    <div class="section">
        <h2>Downstream Metrics</h2>
        <table>
            <tr><th>Head</th><th>Protocol</th><th>Accuracy</th><th>mAP</th><th>AUC</th><th>d-prime</th><th>Clips</th><th>Augmentation</th></tr>
            {% for row in metrics %}
            <tr>
                <td>{{ row.head }}</td><td>{{ row.protocol }}</td>
                <td>{{ format_float(row.accuracy) }}</td><td>{{ format_float(row.mAP) }}</td>
                <td>{{ format_float(row.auc) }}</td><td>{{ format_float(row.d_prime) }}</td>
                <td>{{ row.num_eval_clips }}</td><td>{{ row.augmentation_mode }}</td>
            </tr>
            {% endfor %}
        </table>
    </div>
    {% else %}
    <div class="section"><p>No downstream metrics found in this run directory.</p></div>
    {% endif %}
</body>
</html>
"""

    @staticmethod
    def format_float(value: Any, digits: int = 4) -> str:
        """Fixed-precision rendering; non-numbers pass through"""
        try:
            return f"{float(value):.{digits}f}"
        except (TypeError, ValueError):
            return str(value)

    @staticmethod
    def summarize_losses(final: Dict[str, Any]) -> Dict[str, str]:
        """Readable overview entries from the last loss-log record"""
        keys = ('total', 'l_vs', 'l_vw', 'l_sw')
        return {f"final {key}": ReportTemplates.format_float(final[key]) for key in keys if key in final}
