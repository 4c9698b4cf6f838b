# Autodiff, front end, augmentation, model, objective, training and evaluation
