# Reports generation modules 