"""Services layer - application orchestration"""
