# Pipeline stage services
