// melding pass
