# Predict API module
